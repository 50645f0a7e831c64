use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::manifest::PersonRecord;
use crate::error::{PgdsError, Result};
use crate::rng::{self, tag};

/// P identities x K instances batch sampler. Every batch therefore holds at
/// least one positive and one negative for each anchor.
#[derive(Debug, Clone)]
pub struct PkSampler {
    /// Record indices grouped by identity, in ascending identity order.
    groups: Vec<(u32, Vec<usize>)>,
    p: usize,
    k: usize,
    seed: u64,
}

/// One batch: record indices and the identity of each slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<u32>,
}

impl PkSampler {
    /// `records` are the candidates (usually the training split); indices in
    /// the produced batches refer to positions in this slice.
    pub fn new(records: &[PersonRecord], p: usize, k: usize, seed: u64) -> Result<Self> {
        if p < 2 || k < 1 {
            return Err(PgdsError::domain("P must be at least 2 and K at least 1"));
        }
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_id.entry(r.identity_id).or_default().push(i);
        }
        if by_id.len() < p {
            return Err(PgdsError::domain(format!(
                "need {p} identities per batch but only {} are available",
                by_id.len()
            )));
        }
        Ok(Self {
            groups: by_id.into_iter().collect(),
            p,
            k,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Batches of one epoch. Each identity's images are shuffled and cut into
    /// chunks of K; a short final chunk (or an identity with fewer than K
    /// images) is topped up by sampling that identity's images with
    /// replacement. Batches draw P identities among those with chunks left.
    pub fn epoch(&self, epoch: u64) -> Vec<PkBatch> {
        let mut rng = rng::stream(self.seed, &[tag::BATCH_ORDER, epoch]);
        let mut chunks: Vec<(u32, Vec<Vec<usize>>)> = self
            .groups
            .iter()
            .map(|(id, idx)| {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                let mut cs: Vec<Vec<usize>> = idx.chunks(self.k).map(<[usize]>::to_vec).collect();
                if let Some(last) = cs.last_mut() {
                    while last.len() < self.k {
                        last.push(idx[rng.random_range(0..idx.len())]);
                    }
                }
                cs.reverse();
                (*id, cs)
            })
            .collect();

        let mut batches = Vec::new();
        loop {
            let mut open: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].1.is_empty()).collect();
            if open.len() < self.p {
                break;
            }
            open.shuffle(&mut rng);
            let mut batch = PkBatch {
                indices: Vec::with_capacity(self.batch_size()),
                labels: Vec::with_capacity(self.batch_size()),
            };
            for &g in &open[..self.p] {
                let (id, cs) = &mut chunks[g];
                let chunk = cs.pop().expect("open group has a chunk");
                batch.labels.extend(std::iter::repeat_n(*id, chunk.len()));
                batch.indices.extend(chunk);
            }
            batches.push(batch);
        }
        batches
    }
}
