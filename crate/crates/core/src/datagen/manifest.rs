use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PgdsError, Result};

pub const MANIFEST_HEADER: &str = "identity_id,camera_id,clothes_id,pose_seed,split,image_path";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// Labels of one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PersonRecord {
    pub identity_id: u32,
    pub camera_id: u32,
    pub clothes_id: u32,
    pub pose_seed: u64,
    pub split: Split,
    /// Relative to the dataset root.
    pub image_path: String,
}

impl PersonRecord {
    pub fn key(&self) -> (u32, u32, u32, u64) {
        (self.identity_id, self.camera_id, self.clothes_id, self.pose_seed)
    }

    /// Path of the ground-truth keypoint heatmap that accompanies the image.
    pub fn heatmap_path(&self) -> String {
        let stem = self
            .image_path
            .strip_suffix(".png")
            .unwrap_or(&self.image_path);
        let stem = stem.strip_prefix("images/").unwrap_or(stem);
        format!("heatmaps/{stem}.hm")
    }
}

pub fn write_manifest(path: &Path, records: &[PersonRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| PgdsError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> PgdsError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PgdsError::io(path, io),
        other => PgdsError::Parse(format!("{}: {other:?}", path.display())),
    }
}

/// Reads a manifest without touching the image files.
pub fn parse_manifest(path: &Path) -> Result<Vec<PersonRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != MANIFEST_HEADER {
        return Err(PgdsError::Parse(format!(
            "{}: unexpected header '{header}'",
            path.display()
        )));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.deserialize::<PersonRecord>().enumerate() {
        // row 1 is the header
        let row = row.map_err(|e| PgdsError::Parse(format!("row {}: {e}", i + 2)))?;
        records.push(row);
    }
    Ok(records)
}

/// Checks the structural invariants of a record list: non-empty, unique
/// keys, and every query identity present in the gallery.
pub fn validate_records(records: &[PersonRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(PgdsError::domain("no records"));
    }
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert(r.key()) {
            return Err(PgdsError::Validation(format!(
                "row {}: duplicate record key {:?}",
                i + 2,
                r.key()
            )));
        }
    }
    let gallery: BTreeSet<u32> = records
        .iter()
        .filter(|r| r.split == Split::Gallery)
        .map(|r| r.identity_id)
        .collect();
    if let Some(r) = records
        .iter()
        .find(|r| r.split == Split::Query && !gallery.contains(&r.identity_id))
    {
        return Err(PgdsError::Validation(format!(
            "query identity {} has no gallery images",
            r.identity_id
        )));
    }
    Ok(())
}

/// Parses and validates a manifest, also checking that every image exists
/// relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<PersonRecord>> {
    let records = parse_manifest(path)?;
    validate_records(&records)?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    for r in &records {
        if !root.join(&r.image_path).is_file() {
            return Err(PgdsError::Validation(format!(
                "missing image file {}",
                r.image_path
            )));
        }
    }
    Ok(records)
}
