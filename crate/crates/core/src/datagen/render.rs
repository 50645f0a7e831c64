//! Stick-figure renderer. Geometry depends only on the identity and the pose
//! seed; clothing colour only on the clothes id; background only on the
//! camera and domain.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::heatmap::KeypointHeatmap;
use super::identity::{DomainStyle, IdentitySpec};
use crate::image_tensor::ImageTensor;
use crate::rng::{self, tag};

pub const JOINT_NAMES: [&str; 13] = [
    "head",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_hand",
    "r_hand",
    "pelvis",
    "l_knee",
    "r_knee",
    "l_foot",
    "r_foot",
];
pub const NUM_JOINTS: usize = 13;

const HEAD: usize = 0;
const NECK: usize = 1;
const L_SHOULDER: usize = 2;
const R_SHOULDER: usize = 3;
const L_ELBOW: usize = 4;
const R_ELBOW: usize = 5;
const L_HAND: usize = 6;
const R_HAND: usize = 7;
const PELVIS: usize = 8;
const L_KNEE: usize = 9;
const R_KNEE: usize = 10;
const L_FOOT: usize = 11;
const R_FOOT: usize = 12;

/// Heatmaps are rendered at a quarter of the image resolution.
pub const HEATMAP_STRIDE: usize = 4;
const HEATMAP_SIGMA: f64 = 1.0;
/// Peak of the bone ridge relative to the joint peak.
const BONE_LEVEL: f64 = 1.0;

type Point = [f64; 2];

/// Joint positions in image pixel coordinates (x, y).
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub joints: [Point; NUM_JOINTS],
    pub hips: [Point; 2],
    pub head_radius: f64,
    pub thickness: f64,
}

impl Skeleton {
    /// The bone drawn into joint `j`'s confidence map.
    fn bone(&self, j: usize) -> (Point, Point) {
        let p = &self.joints;
        match j {
            HEAD => (p[HEAD], p[NECK]),
            NECK => (p[NECK], p[PELVIS]),
            L_SHOULDER | R_SHOULDER => (p[j], p[NECK]),
            L_ELBOW => (p[L_ELBOW], p[L_SHOULDER]),
            R_ELBOW => (p[R_ELBOW], p[R_SHOULDER]),
            L_HAND => (p[L_HAND], p[L_ELBOW]),
            R_HAND => (p[R_HAND], p[R_ELBOW]),
            PELVIS => (self.hips[0], self.hips[1]),
            L_KNEE => (p[L_KNEE], self.hips[0]),
            R_KNEE => (p[R_KNEE], self.hips[1]),
            L_FOOT => (p[L_FOOT], p[L_KNEE]),
            R_FOOT => (p[R_FOOT], p[R_KNEE]),
            _ => unreachable!("joint index out of range"),
        }
    }

    /// Lengths of the bones, one per joint channel.
    pub fn bone_lengths(&self) -> Vec<f64> {
        (0..NUM_JOINTS)
            .map(|j| {
                let (a, b) = self.bone(j);
                dist(a, b)
            })
            .collect()
    }
}

fn add(a: Point, b: Point, s: f64) -> Point {
    [a[0] + b[0] * s, a[1] + b[1] * s]
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, add(a, ab, t))
}

/// Places the skeleton of `identity` in the pose drawn from `pose_seed`.
pub fn pose_skeleton(identity: &IdentitySpec, pose_seed: u64, height: usize, width: usize) -> Skeleton {
    let s = height as f64 / 96.0;
    let b = identity.body_scale * s;
    let r = &identity.limb_ratios;
    let mut rng = rng::stream(pose_seed, &[tag::POSE_SEED]);
    let torso = 24.0 * r[0] * b;
    let upper_arm = 11.0 * r[1] * b;
    let forearm = 10.0 * r[2] * b;
    let thigh = 16.0 * r[3] * b;
    let shin = 16.0 * r[4] * b;
    let shoulder = 4.5 * r[5] * b;
    let hip = 3.0 * r[6] * b;
    let head_r = 4.2 * identity.head_size * b;

    let lean: f64 = rng.random_range(-0.08..0.08);
    let cx = width as f64 / 2.0 + rng.random_range(-1.5..1.5) * s;
    let neck_y = 3.0 * s + 2.0 * head_r + rng.random_range(0.0..2.0) * s;
    let down = [lean.sin(), lean.cos()];
    let across = [lean.cos(), -lean.sin()];

    let mut j = [[0.0; 2]; NUM_JOINTS];
    j[NECK] = [cx, neck_y];
    j[HEAD] = add(j[NECK], down, -(head_r + 0.5 * s));
    j[PELVIS] = add(j[NECK], down, torso);
    j[L_SHOULDER] = add(j[NECK], across, -shoulder);
    j[R_SHOULDER] = add(j[NECK], across, shoulder);
    let hips = [add(j[PELVIS], across, -hip), add(j[PELVIS], across, hip)];

    for (side, sh, el, ha) in [(-1.0, L_SHOULDER, L_ELBOW, L_HAND), (1.0, R_SHOULDER, R_ELBOW, R_HAND)] {
        let phi: f64 = rng.random_range(-0.25..0.35);
        j[el] = add(j[sh], [side * phi.sin(), phi.cos()], upper_arm);
        let phi2 = phi + rng.random_range(-0.6..0.3);
        j[ha] = add(j[el], [side * phi2.sin(), phi2.cos()], forearm);
    }

    let stride: f64 = rng.random_range(-0.3..0.3);
    let follow: f64 = rng.random_range(0.6..1.0);
    for (idx, (side, kn, ft)) in [(-1.0, L_KNEE, L_FOOT), (1.0, R_KNEE, R_FOOT)].into_iter().enumerate() {
        let psi = side * 0.05 + if idx == 0 { stride } else { -stride * follow };
        j[kn] = add(hips[idx], [psi.sin(), psi.cos()], thigh);
        let psi2 = psi + rng.random_range(-0.25..0.25);
        j[ft] = add(j[kn], [psi2.sin(), psi2.cos()], shin);
    }

    let mut sk = Skeleton {
        joints: j,
        hips,
        head_radius: head_r,
        thickness: identity.limb_thickness * s,
    };
    let max_y = sk.joints.iter().map(|p| p[1]).fold(f64::MIN, f64::max);
    let limit = height as f64 - 1.5 * s;
    if max_y > limit {
        let dy = max_y - limit;
        sk.joints.iter_mut().for_each(|p| p[1] -= dy);
        sk.hips.iter_mut().for_each(|p| p[1] -= dy);
    }
    sk
}

/// Ground-truth confidence maps at 1/`HEATMAP_STRIDE` resolution. Channel
/// `j` peaks (value 1) at joint `j` and carries a full-height ridge along the
/// bone ending at that joint.
pub fn render_heatmap(sk: &Skeleton, height: usize, width: usize) -> KeypointHeatmap {
    let (hh, hw) = (height / HEATMAP_STRIDE, width / HEATMAP_STRIDE);
    let scale = 1.0 / HEATMAP_STRIDE as f64;
    let mut hm = KeypointHeatmap::zeros(hh, hw, NUM_JOINTS);
    let inv = 1.0 / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA);
    for jt in 0..NUM_JOINTS {
        let centre = [sk.joints[jt][0] * scale, sk.joints[jt][1] * scale];
        let (a, b) = sk.bone(jt);
        let (a, b) = ([a[0] * scale, a[1] * scale], [b[0] * scale, b[1] * scale]);
        for y in 0..hh {
            for x in 0..hw {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let peak = (-dist(p, centre).powi(2) * inv).exp();
                let ridge = BONE_LEVEL * (-dist_to_segment(p, a, b).powi(2) * inv).exp();
                hm.set(y, x, jt, peak.max(ridge) as f32);
            }
        }
    }
    hm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outfit {
    pub shirt: [f64; 3],
    pub trousers: [f64; 3],
}

/// Clothing colours as a function of the clothes id (and the dataset seed).
pub fn outfit(dataset_seed: u64, clothes_id: u32) -> Outfit {
    let mut r = rng::stream(dataset_seed, &[tag::CLOTHES, clothes_id as u64]);
    let mut c = || [r.random_range(0.05..0.95), r.random_range(0.05..0.95), r.random_range(0.05..0.95)];
    Outfit {
        shirt: c(),
        trousers: c(),
    }
}

/// Everything needed to draw one image.
#[derive(Debug, Clone)]
pub struct RenderRequest<'a> {
    pub identity: &'a IdentitySpec,
    pub camera_id: u32,
    pub outfit: Outfit,
    pub pose_seed: u64,
    pub style: DomainStyle,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct RenderedPerson {
    pub image: ImageTensor,
    pub heatmap: KeypointHeatmap,
    /// Row-major H x W mask of body pixels.
    pub body_mask: Vec<bool>,
    pub skeleton: Skeleton,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Background,
    Trousers,
    Shirt,
    Skin,
}

fn inside_convex(p: Point, poly: &[Point]) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

pub fn render_person(req: &RenderRequest<'_>) -> RenderedPerson {
    let (h, w) = (req.height, req.width);
    let sk = pose_skeleton(req.identity, req.pose_seed, h, w);
    let j = &sk.joints;
    let t = sk.thickness;

    let mut parts = vec![Part::Background; h * w];
    let mut paint = |part: Part, hit: &dyn Fn(Point) -> bool| {
        for y in 0..h {
            for x in 0..w {
                if hit([x as f64 + 0.5, y as f64 + 0.5]) {
                    parts[y * w + x] = part;
                }
            }
        }
    };
    let segments = |segs: Vec<(Point, Point)>, radius: f64| {
        move |p: Point| segs.iter().any(|&(a, b)| dist_to_segment(p, a, b) <= radius)
    };

    paint(
        Part::Trousers,
        &segments(
            vec![
                (sk.hips[0], j[L_KNEE]),
                (j[L_KNEE], j[L_FOOT]),
                (sk.hips[1], j[R_KNEE]),
                (j[R_KNEE], j[R_FOOT]),
            ],
            0.65 * t,
        ),
    );
    let torso_poly = [j[L_SHOULDER], j[R_SHOULDER], sk.hips[1], sk.hips[0]];
    let torso_line = segments(vec![(j[NECK], j[PELVIS])], 0.5 * t);
    paint(Part::Shirt, &|p| inside_convex(p, &torso_poly) || torso_line(p));
    paint(
        Part::Shirt,
        &segments(vec![(j[L_SHOULDER], j[L_ELBOW]), (j[R_SHOULDER], j[R_ELBOW])], 0.5 * t),
    );
    paint(
        Part::Skin,
        &segments(vec![(j[L_ELBOW], j[L_HAND]), (j[R_ELBOW], j[R_HAND])], 0.4 * t),
    );
    let hands = [j[L_HAND], j[R_HAND]];
    paint(Part::Skin, &|p| hands.iter().any(|&c| dist(p, c) <= 0.6 * t));
    let head = j[HEAD];
    let hr = sk.head_radius;
    paint(Part::Skin, &|p| dist(p, head) <= hr);

    let mut r = rng::stream(req.pose_seed, &[tag::RENDER, req.camera_id as u64]);
    let palette = req.style.background_palette();
    let bg = palette[req.camera_id as usize % palette.len()];
    let gain = 1.0 + 0.05 * ((req.camera_id % 3) as f64 - 1.0);
    let light: f64 = r.random_range(0.92..1.08);
    let noise = Normal::new(0.0, 0.015).expect("valid std");
    let skin = req.identity.base_skin_tone.map(|c| c * light);

    let mut data = vec![0.0; h * w * 3];
    let mut body_mask = vec![false; h * w];
    for y in 0..h {
        let shade = 0.85 + 0.15 * y as f64 / h as f64;
        for x in 0..w {
            let idx = y * w + x;
            let part = parts[idx];
            body_mask[idx] = part != Part::Background;
            let base = match part {
                Part::Background => bg.map(|c| c * shade),
                Part::Trousers => req.outfit.trousers,
                Part::Shirt => req.outfit.shirt,
                Part::Skin => skin,
            };
            for c in 0..3 {
                let v = base[c] * gain + noise.sample(&mut r);
                data[idx * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    let image = ImageTensor::new(h, w, data).expect("renderer produces a valid image");
    let heatmap = render_heatmap(&sk, h, w);
    RenderedPerson {
        image,
        heatmap,
        body_mask,
        skeleton: sk,
    }
}
