//! Synthetic clothes-changing person dataset: generation, manifest I/O,
//! PK batch sampling and training-time augmentation.

mod augment;
mod dataset;
mod heatmap;
mod identity;
mod manifest;
mod render;
mod sampler;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_detailed, AugmentOutcome, EraseRect};
pub use dataset::{Dataset, DatasetMeta};
pub use heatmap::KeypointHeatmap;
pub use identity::{sample_identities, DomainStyle, IdentitySpec, LIMB_NAMES};
pub use manifest::{
    load_manifest, parse_manifest, validate_records, write_manifest, PersonRecord, Split,
    MANIFEST_HEADER,
};
pub use render::{
    outfit, pose_skeleton, render_heatmap, render_person, Outfit, RenderRequest, RenderedPerson,
    Skeleton, HEATMAP_STRIDE, JOINT_NAMES, NUM_JOINTS,
};
pub use sampler::{PkBatch, PkSampler};

use crate::error::{PgdsError, Result};
use crate::rng::{derive_seed, tag};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub identities: usize,
    pub cameras: usize,
    pub clothes_per_identity: usize,
    pub images_per_combination: usize,
    /// The last `test_identities` identities form the query/gallery split;
    /// the rest are used for training. Defaults to half.
    pub test_identities: Option<usize>,
    pub seed: u64,
    pub style: DomainStyle,
    pub height: usize,
    pub width: usize,
}

impl GeneratorSpec {
    pub fn new(identities: usize, cameras: usize, clothes: usize, images: usize, seed: u64) -> Self {
        Self {
            identities,
            cameras,
            clothes_per_identity: clothes,
            images_per_combination: images,
            test_identities: None,
            seed,
            style: DomainStyle::A,
            height: 96,
            width: 32,
        }
    }

    pub fn num_test_identities(&self) -> usize {
        self.test_identities.unwrap_or(self.identities / 2)
    }

    fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(PgdsError::domain("at least two identities are required"));
        }
        if self.clothes_per_identity < 2 {
            return Err(PgdsError::domain(
                "at least two outfits per identity are required for the clothes-changing protocol",
            ));
        }
        if self.cameras == 0 || self.images_per_combination == 0 {
            return Err(PgdsError::domain("cameras and images per combination must be positive"));
        }
        let t = self.num_test_identities();
        if t == 0 || t > self.identities {
            return Err(PgdsError::domain(format!("invalid test identity count {t}")));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return Err(PgdsError::domain("image size must be a positive multiple of 32"));
        }
        Ok(())
    }

    /// Split of image `m` of a test identity seen by camera `camera`.
    fn test_split(&self, camera: usize, m: usize) -> Split {
        let is_query = if self.images_per_combination > 1 {
            m == 0
        } else {
            camera == 0 && self.cameras > 1
        };
        if is_query {
            Split::Query
        } else {
            Split::Gallery
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSummary {
    pub records: Vec<PersonRecord>,
    pub identities: Vec<IdentitySpec>,
}

/// Global clothes id of outfit `k` of `identity`.
pub fn clothes_id(identity: u32, k: usize, clothes_per_identity: usize) -> u32 {
    identity * clothes_per_identity as u32 + k as u32
}

/// Renders the full dataset into `out_dir`: `manifest.csv`, `dataset.json`,
/// `images/*.png` and `heatmaps/*.hm`.
pub fn generate_dataset(spec: &GeneratorSpec, out_dir: &Path) -> Result<GenerationSummary> {
    spec.validate()?;
    for sub in ["images", "heatmaps"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| PgdsError::io(&d, e))?;
    }
    let identities = sample_identities(spec.identities, spec.seed, spec.style);
    let first_test = spec.identities - spec.num_test_identities();
    let mut records = Vec::new();
    for ident in &identities {
        let id = ident.identity_id;
        for camera in 0..spec.cameras {
            for k in 0..spec.clothes_per_identity {
                let clothes = clothes_id(id, k, spec.clothes_per_identity);
                for m in 0..spec.images_per_combination {
                    let pose_seed = derive_seed(
                        spec.seed,
                        &[tag::POSE_SEED, id as u64, camera as u64, k as u64, m as u64],
                    );
                    let split = if (id as usize) < first_test {
                        Split::Train
                    } else {
                        spec.test_split(camera, m)
                    };
                    let rec = PersonRecord {
                        identity_id: id,
                        camera_id: camera as u32,
                        clothes_id: clothes,
                        pose_seed,
                        split,
                        image_path: format!("images/{id:04}_c{camera}_k{clothes:04}_{m:03}.png"),
                    };
                    let person = render_person(&RenderRequest {
                        identity: ident,
                        camera_id: camera as u32,
                        outfit: outfit(spec.seed, clothes),
                        pose_seed,
                        style: spec.style,
                        height: spec.height,
                        width: spec.width,
                    });
                    person.image.save_png(&out_dir.join(&rec.image_path))?;
                    person.heatmap.write(&out_dir.join(rec.heatmap_path()))?;
                    records.push(rec);
                }
            }
        }
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    let meta = DatasetMeta {
        generator: spec.clone(),
        identities: identities.clone(),
    };
    let meta_path = out_dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    std::fs::write(&meta_path, json).map_err(|e| PgdsError::io(&meta_path, e))?;
    Ok(GenerationSummary {
        records,
        identities,
    })
}
