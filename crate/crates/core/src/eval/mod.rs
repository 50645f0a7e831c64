//! Retrieval metrics under the standard, clothes-changing and cross-domain
//! protocols, plus input-gradient saliency maps.

mod saliency;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use saliency::{saliency_heatmap, saliency_map, write_saliency_overlay};

use crate::datagen::{Dataset, PersonRecord, Split};
use crate::encoders::HumanEncoder;
use crate::error::{PgdsError, Result};
use crate::image_tensor::ImageTensor;
use crate::nn::{ExecTrace, Matrix};

const EMBED_CHUNK: usize = 64;

/// L2-normalised embeddings with the record of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub embeddings: Matrix,
    pub records: Vec<PersonRecord>,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn l2_normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Eval-mode embeddings through the human encoder only.
pub fn extract_embeddings(
    human: &HumanEncoder,
    images: &[&ImageTensor],
    records: Vec<PersonRecord>,
    trace: Option<&mut ExecTrace>,
) -> Result<GalleryIndex> {
    if images.len() != records.len() {
        return Err(PgdsError::domain(format!("{} images for {} records", images.len(), records.len())));
    }
    if images.is_empty() {
        return Err(PgdsError::domain("no images to embed"));
    }
    let mut embeddings = human.embed(images, EMBED_CHUNK, trace)?;
    l2_normalize_rows(&mut embeddings);
    Ok(GalleryIndex { embeddings, records })
}

/// Embeds the records of one split of an in-memory dataset.
pub fn extract_split(human: &HumanEncoder, dataset: &Dataset, split: Split) -> Result<GalleryIndex> {
    let idx = dataset.indices(split);
    let images: Vec<&ImageTensor> = idx.iter().map(|&i| &dataset.images[i]).collect();
    extract_embeddings(human, &images, dataset.records_at(&idx), None)
}

/// Loads each record's image from `root` and embeds it.
pub fn extract_from_disk(human: &HumanEncoder, root: &Path, records: &[PersonRecord]) -> Result<GalleryIndex> {
    let images = records
        .iter()
        .map(|r| {
            ImageTensor::load_png(&root.join(&r.image_path)).map_err(|e| match e {
                PgdsError::Io { path, source } => PgdsError::Io {
                    path,
                    source: std::io::Error::new(
                        source.kind(),
                        format!("record identity {} camera {}: {source}", r.identity_id, r.camera_id),
                    ),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageTensor> = images.iter().collect();
    extract_embeddings(human, &refs, records.to_vec(), None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Drops same-identity gallery entries from the query's camera.
    Standard,
    /// Additionally drops same-identity entries wearing the query's clothes.
    Cc,
    /// Standard filtering on a dataset from another rendering domain.
    CrossDomain,
}

impl std::str::FromStr for EvalMode {
    type Err = PgdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(EvalMode::Standard),
            "cc" => Ok(EvalMode::Cc),
            "cross" | "cross_domain" => Ok(EvalMode::CrossDomain),
            other => Err(PgdsError::domain(format!("unknown evaluation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// `cmc[k - 1]`: fraction of scored queries with a match in the top k.
    pub cmc: Vec<f64>,
    pub per_query_ap: Vec<f64>,
    pub scored_queries: usize,
    pub excluded_queries: usize,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| PgdsError::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| PgdsError::io(path, e))
    }

    pub fn write_cmc_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| PgdsError::io(path, e.into()))?;
        w.write_record(["rank", "cmc"]).map_err(|e| PgdsError::io(path, e.into()))?;
        for (k, v) in self.cmc.iter().enumerate() {
            w.write_record([(k + 1).to_string(), format!("{v}")])
                .map_err(|e| PgdsError::io(path, e.into()))?;
        }
        w.flush().map_err(|e| PgdsError::io(path, e))
    }
}

fn keep(query: &PersonRecord, cand: &PersonRecord, mode: EvalMode) -> bool {
    if cand.identity_id != query.identity_id {
        return true;
    }
    if cand.camera_id == query.camera_id {
        return false;
    }
    !(mode == EvalMode::Cc && cand.clothes_id == query.clothes_id)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gallery rows ranked for one query, protocol filter applied. Ties in
/// distance go to the lower gallery row.
pub fn ranked_gallery(query: &[f64], query_record: &PersonRecord, gallery: &GalleryIndex, mode: EvalMode) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = (0..gallery.len())
        .filter(|&g| keep(query_record, &gallery.records[g], mode))
        .map(|g| (g, sq_dist(query, gallery.embeddings.row(g))))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}

/// mAP, Rank-k and CMC of `queries` against `gallery` under `mode`.
pub fn evaluate(queries: &GalleryIndex, gallery: &GalleryIndex, mode: EvalMode) -> Result<MetricsReport> {
    if gallery.is_empty() || queries.is_empty() {
        return Err(PgdsError::domain("query and gallery sets must be non-empty"));
    }
    let g = gallery.len();
    let mut hits = vec![0usize; g];
    let mut aps = Vec::with_capacity(queries.len());
    let mut excluded = 0usize;
    let mut any_candidates = false;
    for q in 0..queries.len() {
        let qr = &queries.records[q];
        let ranked = ranked_gallery(queries.embeddings.row(q), qr, gallery, mode);
        any_candidates |= !ranked.is_empty();
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (rank, (row, _)) in ranked.iter().enumerate() {
            if gallery.records[*row].identity_id == qr.identity_id {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
                first.get_or_insert(rank);
            }
        }
        match first {
            Some(r) => {
                aps.push(precision_sum / found as f64);
                hits[r] += 1;
            }
            None => excluded += 1,
        }
    }
    if !any_candidates {
        return Err(PgdsError::domain("protocol filter removed the whole gallery for every query"));
    }
    if aps.is_empty() {
        return Err(PgdsError::domain("no query has a relevant gallery entry after filtering"));
    }
    let scored = aps.len();
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / scored as f64);
    }
    let at = |k: usize| cmc[k.min(cmc.len()) - 1];
    Ok(MetricsReport {
        mode,
        map: aps.iter().sum::<f64>() / scored as f64,
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        cmc,
        per_query_ap: aps,
        scored_queries: scored,
        excluded_queries: excluded,
    })
}

/// Query/gallery evaluation of one in-memory dataset.
pub fn evaluate_dataset(human: &HumanEncoder, dataset: &Dataset, mode: EvalMode) -> Result<MetricsReport> {
    let q = extract_split(human, dataset, Split::Query)?;
    let g = extract_split(human, dataset, Split::Gallery)?;
    evaluate(&q, &g, mode)
}

/// Standard-protocol evaluation of a model on a dataset from another domain,
/// without any adaptation.
pub fn cross_domain_evaluate(human: &HumanEncoder, target: &Dataset) -> Result<MetricsReport> {
    evaluate_dataset(human, target, EvalMode::CrossDomain)
}

/// The `k` nearest gallery rows to one image (no protocol filter).
pub fn query_topk(human: &HumanEncoder, image: &ImageTensor, gallery: &GalleryIndex, k: usize) -> Result<Vec<(usize, f64)>> {
    let q = extract_embeddings(human, &[image], vec![placeholder_record()], None)?;
    let mut ranked: Vec<(usize, f64)> = (0..gallery.len())
        .map(|g| (g, sq_dist(q.embeddings.row(0), gallery.embeddings.row(g))))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

fn placeholder_record() -> PersonRecord {
    PersonRecord {
        identity_id: u32::MAX,
        camera_id: u32::MAX,
        clothes_id: u32::MAX,
        pose_seed: 0,
        split: Split::Query,
        image_path: String::new(),
    }
}
