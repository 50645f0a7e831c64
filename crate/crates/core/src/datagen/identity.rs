use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PgdsError, Result};
use crate::rng::{self, tag};

/// Names of the entries of [`IdentitySpec::limb_ratios`].
pub const LIMB_NAMES: [&str; 7] = [
    "torso",
    "upper_arm",
    "forearm",
    "thigh",
    "shin",
    "shoulder_width",
    "hip_width",
];

const RATIO_RANGE: (f64, f64) = (0.75, 1.25);
const BODY_SCALE_RANGE: (f64, f64) = (0.8, 1.15);
const MIN_RATIO_GAP: f64 = 0.05;

/// Rendering style of a synthetic domain. Two domains differ in background
/// palette and in the distribution of limb thickness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainStyle {
    #[default]
    A,
    B,
}

impl DomainStyle {
    pub fn background_palette(self) -> &'static [[f64; 3]] {
        match self {
            DomainStyle::A => &[
                [0.55, 0.60, 0.68],
                [0.62, 0.64, 0.58],
                [0.50, 0.52, 0.60],
                [0.66, 0.60, 0.62],
            ],
            DomainStyle::B => &[
                [0.78, 0.66, 0.48],
                [0.40, 0.52, 0.40],
                [0.70, 0.50, 0.52],
                [0.45, 0.42, 0.30],
            ],
        }
    }

    /// Limb thickness range in pixels at the 96-pixel reference height.
    pub fn thickness_range(self) -> (f64, f64) {
        match self {
            DomainStyle::A => (2.5, 3.5),
            DomainStyle::B => (3.5, 4.5),
        }
    }
}

impl std::str::FromStr for DomainStyle {
    type Err = PgdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(DomainStyle::A),
            "b" => Ok(DomainStyle::B),
            other => Err(PgdsError::Parse(format!("unknown domain style '{other}'"))),
        }
    }
}

/// The biometric signature of one synthetic person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: u32,
    /// Body proportions relative to a reference skeleton, ordered as [`LIMB_NAMES`].
    pub limb_ratios: Vec<f64>,
    pub head_size: f64,
    /// Overall size multiplier applied on top of the limb ratios.
    pub body_scale: f64,
    pub base_skin_tone: [f64; 3],
    pub limb_thickness: f64,
}

impl IdentitySpec {
    /// Largest relative difference over all limb ratios.
    pub fn ratio_gap(&self, other: &IdentitySpec) -> f64 {
        self.limb_ratios
            .iter()
            .zip(&other.limb_ratios)
            .map(|(a, b)| (a - b).abs() / a.max(*b))
            .fold(0.0, f64::max)
    }
}

/// Draws `n` identities whose limb ratios pairwise differ by at least 5% in
/// at least one entry.
pub fn sample_identities(n: usize, seed: u64, style: DomainStyle) -> Vec<IdentitySpec> {
    let mut out: Vec<IdentitySpec> = Vec::with_capacity(n);
    let (tmin, tmax) = style.thickness_range();
    for id in 0..n as u32 {
        let mut attempt = 0u64;
        loop {
            let mut r = rng::stream(seed, &[tag::IDENTITY, id as u64, attempt]);
            let limb_ratios: Vec<f64> = (0..LIMB_NAMES.len())
                .map(|_| r.random_range(RATIO_RANGE.0..RATIO_RANGE.1))
                .collect();
            let jitter = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-0.05..0.05);
            let spec = IdentitySpec {
                identity_id: id,
                limb_ratios,
                head_size: r.random_range(0.85..1.15),
                body_scale: r.random_range(BODY_SCALE_RANGE.0..BODY_SCALE_RANGE.1),
                base_skin_tone: [0.86 + jitter(&mut r), 0.66 + jitter(&mut r), 0.52 + jitter(&mut r)],
                limb_thickness: r.random_range(tmin..tmax),
            };
            if out.iter().all(|o| o.ratio_gap(&spec) >= MIN_RATIO_GAP) {
                out.push(spec);
                break;
            }
            attempt += 1;
        }
    }
    out
}
