use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::heatmap::KeypointHeatmap;
use super::identity::IdentitySpec;
use super::manifest::{load_manifest, PersonRecord, Split};
use super::render::{outfit, render_person, RenderRequest};
use super::{GeneratorSpec, MANIFEST_FILE, META_FILE};
use crate::error::{PgdsError, Result};
use crate::image_tensor::ImageTensor;

/// Generator provenance written next to a synthetic manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: GeneratorSpec,
    pub identities: Vec<IdentitySpec>,
}

/// A manifest with all images (and heatmaps, when present) held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<PersonRecord>,
    pub images: Vec<ImageTensor>,
    pub heatmaps: Option<Vec<KeypointHeatmap>>,
    pub meta: Option<DatasetMeta>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let records = load_manifest(&root.join(MANIFEST_FILE))?;
        let images = records
            .iter()
            .map(|r| ImageTensor::load_png(&root.join(&r.image_path)))
            .collect::<Result<Vec<_>>>()?;
        let heatmaps = if records.iter().all(|r| root.join(r.heatmap_path()).is_file()) {
            Some(
                records
                    .iter()
                    .map(|r| KeypointHeatmap::read(&root.join(r.heatmap_path())))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let meta_path = root.join(META_FILE);
        let meta = if meta_path.is_file() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| PgdsError::io(&meta_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| PgdsError::Parse(format!("{}: {e}", meta_path.display())))?)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            records,
            images,
            heatmaps,
            meta,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn records_at(&self, indices: &[usize]) -> Vec<PersonRecord> {
        indices.iter().map(|&i| self.records[i].clone()).collect()
    }

    /// Re-renders record `i` to recover its body mask (row-major H x W).
    /// `None` for datasets without generator metadata.
    pub fn body_mask(&self, i: usize) -> Option<Vec<bool>> {
        let meta = self.meta.as_ref()?;
        let rec = self.records.get(i)?;
        let identity = meta.identities.iter().find(|s| s.identity_id == rec.identity_id)?;
        let g = &meta.generator;
        let person = render_person(&RenderRequest {
            identity,
            camera_id: rec.camera_id,
            outfit: outfit(g.seed, rec.clothes_id),
            pose_seed: rec.pose_seed,
            style: g.style,
            height: g.height,
            width: g.width,
        });
        Some(person.body_mask)
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.images
            .first()
            .map_or((0, 0), |i| (i.height(), i.width()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;

    #[test]
    fn body_mask_matches_the_stored_image() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&GeneratorSpec::new(2, 1, 2, 1, 3), dir.path()).unwrap();
        let mut ds = Dataset::load(dir.path()).unwrap();
        let mask = ds.body_mask(0).unwrap();
        let img = &ds.images[0];
        assert_eq!(mask.len(), img.height() * img.width());
        let on = mask.iter().filter(|&&m| m).count();
        assert!(on > 0 && on < mask.len() / 2);
        // background pixels sit near the camera tint; body pixels carry outfit or skin colours
        let bg = img.pixel(0, 0);
        let far = |p: [f64; 3]| (0..3).map(|c| (p[c] - bg[c]).abs()).fold(0.0, f64::max) > 0.2;
        let w = img.width();
        let body_far = (0..mask.len()).filter(|&i| mask[i] && far(img.pixel(i / w, i % w))).count();
        assert!(body_far * 2 > on);
        ds.meta = None;
        assert!(ds.body_mask(0).is_none());
    }
}
