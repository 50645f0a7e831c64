//! Batch-hard triplet loss, the KL-based pose guide loss and their combination.

use serde::{Deserialize, Serialize};

use crate::error::{PgdsError, Result};
use crate::nn::Matrix;
use crate::simplex::{kl_slices, ProbVector};

/// Identity label of every batch element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabels(Vec<u32>);

impl BatchLabels {
    /// Requires at least two identities, each appearing at least twice.
    pub fn new(labels: Vec<u32>) -> Result<Self> {
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        let mut distinct = 0;
        for run in sorted.chunk_by(|a, b| a == b) {
            if run.len() < 2 {
                return Err(PgdsError::domain(format!("identity {} appears only once in the batch", run[0])));
            }
            distinct += 1;
        }
        if distinct < 2 {
            return Err(PgdsError::domain("a batch needs at least two identities"));
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over anchors of `max(0, d_ap - d_an + margin)` with the hardest positive
/// and negative chosen per anchor under squared Euclidean distance. Ties go to
/// the lowest index.
pub fn triplet_batch_hard(embeddings: &Matrix, labels: &BatchLabels, margin: f64) -> Result<f64> {
    triplet_batch_hard_with_grad(embeddings, labels, margin).map(|(l, _)| l)
}

/// [`triplet_batch_hard`] together with its gradient with respect to `embeddings`.
pub fn triplet_batch_hard_with_grad(
    embeddings: &Matrix,
    labels: &BatchLabels,
    margin: f64,
) -> Result<(f64, Matrix)> {
    let n = embeddings.rows;
    let lab = labels.as_slice();
    if lab.len() != n {
        return Err(PgdsError::domain(format!("{} labels for {n} embeddings", lab.len())));
    }
    let mut grad = Matrix::zeros(n, embeddings.cols);
    let mut total = 0.0;
    for i in 0..n {
        let a = embeddings.row(i);
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = sq_dist(a, embeddings.row(j));
            if lab[j] == lab[i] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let ((p, d_ap), (q, d_an)) = match (pos, neg) {
            (Some(p), Some(q)) => (p, q),
            _ => return Err(PgdsError::domain(format!("anchor {i} has no positive or no negative"))),
        };
        let hinge = d_ap - d_an + margin;
        if hinge > 0.0 {
            total += hinge;
            let scale = 2.0 / n as f64;
            for c in 0..embeddings.cols {
                let (ai, pi, ni) = (a[c], embeddings.row(p)[c], embeddings.row(q)[c]);
                grad.data[i * grad.cols + c] += scale * ((ai - pi) - (ai - ni));
                grad.data[p * grad.cols + c] -= scale * (ai - pi);
                grad.data[q * grad.cols + c] += scale * (ai - ni);
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// Symmetric KL for same-identity pairs; two margin hinges otherwise.
pub fn guide_pair_loss(pose: &ProbVector, feature: &ProbVector, same_identity: bool, margin: f64) -> Result<f64> {
    if pose.len() != feature.len() {
        return Err(PgdsError::domain(format!("dimension mismatch: {} vs {}", pose.len(), feature.len())));
    }
    if !(margin > 0.0) {
        return Err(PgdsError::domain(format!("margin must be positive, got {margin}")));
    }
    Ok(pair_loss(pose.probs(), feature.probs(), same_identity, margin, None))
}

/// Pair loss on raw slices; when `grad` is given, adds d(loss)/d(feature) into it.
fn pair_loss(p: &[f64], q: &[f64], same: bool, margin: f64, grad: Option<(&mut [f64], f64)>) -> f64 {
    let kl_pq = kl_slices(p, q);
    let kl_qp = kl_slices(q, p);
    let (loss, w_pq, w_qp) = if same {
        (kl_pq + kl_qp, 1.0, 1.0)
    } else {
        let h1 = margin - kl_pq;
        let h2 = margin - kl_qp;
        (
            h1.max(0.0) + h2.max(0.0),
            if h1 > 0.0 { -1.0 } else { 0.0 },
            if h2 > 0.0 { -1.0 } else { 0.0 },
        )
    };
    if let Some((g, scale)) = grad {
        for k in 0..q.len() {
            let d_pq = -p[k] / q[k];
            let d_qp = (q[k] / p[k]).ln() + 1.0;
            g[k] += scale * (w_pq * d_pq + w_qp * d_qp);
        }
    }
    loss
}

/// Guide loss over every layer plus the gradient with respect to each layer's
/// feature probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideOutput {
    pub total: f64,
    pub per_layer: Vec<f64>,
    pub grads: Vec<Matrix>,
}

/// For each layer, all ordered pairs `(j, k)` of the batch pair the pose
/// distribution of `j` with the feature distribution of `k`. Positive and
/// negative pair losses are averaged separately and summed; the total is the
/// mean over layers.
pub fn guide_loss_batch(
    pose_probs: &[ProbVector],
    feature_probs: &[Vec<ProbVector>],
    labels: &BatchLabels,
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    let to_matrix = |v: &[ProbVector]| -> Result<Matrix> {
        let dim = v.first().map_or(0, ProbVector::len);
        if v.iter().any(|p| p.len() != dim) {
            return Err(PgdsError::domain("probability vectors of unequal length"));
        }
        Ok(Matrix::from_vec(v.len(), dim, v.iter().flat_map(|p| p.probs().iter().copied()).collect()))
    };
    let pose = to_matrix(pose_probs)?;
    let layers = feature_probs.iter().map(|l| to_matrix(l)).collect::<Result<Vec<_>>>()?;
    let out = guide_loss_with_grad(&pose, &layers, labels, margin)?;
    Ok((out.total, out.per_layer))
}

/// Matrix form of [`guide_loss_batch`]: one probability vector per row.
pub fn guide_loss_with_grad(pose: &Matrix, layers: &[Matrix], labels: &BatchLabels, margin: f64) -> Result<GuideOutput> {
    let n = pose.rows;
    let lab = labels.as_slice();
    if lab.len() != n {
        return Err(PgdsError::domain(format!("{} labels for {n} pose vectors", lab.len())));
    }
    if layers.is_empty() {
        return Err(PgdsError::domain("guide loss needs at least one layer"));
    }
    let mut n_pos = 0usize;
    for j in 0..n {
        for k in 0..n {
            n_pos += usize::from(lab[j] == lab[k]);
        }
    }
    let n_neg = n * n - n_pos;
    if n_neg == 0 {
        return Err(PgdsError::domain("guide loss needs at least two identities in the batch"));
    }
    let layer_weight = 1.0 / layers.len() as f64;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut grads = Vec::with_capacity(layers.len());
    for feat in layers {
        if feat.rows != n || feat.cols != pose.cols {
            return Err(PgdsError::domain(format!(
                "layer probabilities are {}x{}, expected {n}x{}",
                feat.rows, feat.cols, pose.cols
            )));
        }
        let mut grad = Matrix::zeros(n, feat.cols);
        let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
        for j in 0..n {
            for k in 0..n {
                let same = lab[j] == lab[k];
                let w = layer_weight / if same { n_pos } else { n_neg } as f64;
                let l = pair_loss(pose.row(j), feat.row(k), same, margin, Some((grad.row_mut(k), w)));
                if same {
                    pos_sum += l;
                } else {
                    neg_sum += l;
                }
            }
        }
        per_layer.push(pos_sum / n_pos as f64 + neg_sum / n_neg as f64);
        grads.push(grad);
    }
    let total = per_layer.iter().sum::<f64>() * layer_weight;
    Ok(GuideOutput { total, per_layer, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet: f64,
    pub guide: f64,
    pub guide_per_layer: Vec<f64>,
    pub combined: f64,
}

/// `triplet + lambda * guide`.
pub fn combined_loss(triplet: f64, guide: f64, guide_per_layer: Vec<f64>, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        triplet,
        guide,
        guide_per_layer,
        combined: triplet + lambda * guide,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::softmax_cached;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(v: &[u32]) -> BatchLabels {
        BatchLabels::new(v.to_vec()).unwrap()
    }

    fn prob(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    /// Enumerates every (anchor, positive, negative) triple explicitly.
    fn brute_force_triplet(e: &Matrix, lab: &[u32], margin: f64) -> f64 {
        let n = e.rows;
        let mut total = 0.0;
        for a in 0..n {
            let mut worst_pos = f64::NEG_INFINITY;
            let mut worst_neg = f64::INFINITY;
            for p in 0..n {
                for q in 0..n {
                    if p == a || lab[p] != lab[a] || lab[q] == lab[a] {
                        continue;
                    }
                    let dp: f64 = (0..e.cols).map(|c| (e.row(a)[c] - e.row(p)[c]).powi(2)).sum();
                    let dn: f64 = (0..e.cols).map(|c| (e.row(a)[c] - e.row(q)[c]).powi(2)).sum();
                    worst_pos = worst_pos.max(dp);
                    worst_neg = worst_neg.min(dn);
                }
            }
            total += (worst_pos - worst_neg + margin).max(0.0);
        }
        total / n as f64
    }

    #[test]
    fn identical_embeddings_cost_the_margin() {
        let e = Matrix::from_vec(4, 3, vec![0.7; 12]);
        let l = triplet_batch_hard(&e, &labels(&[0, 0, 1, 1]), 0.2).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn separated_identities_cost_nothing() {
        let e = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 0.0]]);
        assert_eq!(triplet_batch_hard(&e, &labels(&[0, 0, 1, 1]), 0.2).unwrap(), 0.0);
    }

    #[test]
    fn triplet_matches_exhaustive_oracle_on_eight() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let e = Matrix::from_vec(8, 5, (0..40).map(|_| r.random_range(-1.0..1.0)).collect());
        let lab = [0, 0, 0, 0, 1, 1, 1, 1];
        let got = triplet_batch_hard(&e, &labels(&lab), 0.2).unwrap();
        assert!((got - brute_force_triplet(&e, &lab, 0.2)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_label_sets_are_rejected() {
        assert!(BatchLabels::new(vec![0, 0, 0]).is_err());
        assert!(BatchLabels::new(vec![0, 0, 1]).is_err());
        let e = Matrix::zeros(4, 2);
        let short = labels(&[0, 0, 1, 1, 1, 0]);
        assert!(triplet_batch_hard(&e, &short, 0.2).is_err());
    }

    #[test]
    fn pair_loss_reference_values() {
        let p = prob(&[0.25, 0.25, 0.5]);
        assert_eq!(guide_pair_loss(&p, &p, true, 2.0).unwrap(), 0.0);
        assert!((guide_pair_loss(&p, &p, false, 2.0).unwrap() - 4.0).abs() < 1e-12);
        let q = prob(&[1e-8, 1e-8, 1.0 - 2e-8]);
        let r = prob(&[1.0 - 2e-8, 1e-8, 1e-8]);
        // both directed divergences are near 18 > m
        assert_eq!(guide_pair_loss(&q, &r, false, 2.0).unwrap(), 0.0);
        assert!(guide_pair_loss(&q, &prob(&[0.5, 0.5]), true, 2.0).is_err());
    }

    #[test]
    fn pair_loss_symmetric_branch_value() {
        let p = prob(&[0.5, 0.5]);
        let q = prob(&[0.25, 0.75]);
        let kl_pq = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let kl_qp = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        let got = guide_pair_loss(&p, &q, true, 2.0).unwrap();
        assert!((got - (kl_pq + kl_qp)).abs() < 1e-12);
    }

    fn random_probs(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<ProbVector> {
        (0..n)
            .map(|_| {
                let logits: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
                ProbVector::new(softmax_cached(&logits, 2.0).unwrap().probs().to_vec()).unwrap()
            })
            .collect()
    }

    #[test]
    fn guide_batch_matches_double_loop_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let lab = [0, 0, 0, 1, 1, 1];
        let pose = random_probs(&mut r, 6, 4);
        let layers: Vec<Vec<ProbVector>> = (0..3).map(|_| random_probs(&mut r, 6, 4)).collect();
        let (total, per_layer) = guide_loss_batch(&pose, &layers, &labels(&lab), 2.0).unwrap();
        let mut expected = Vec::new();
        for layer in &layers {
            let (mut ps, mut pc, mut ns, mut nc) = (0.0, 0.0, 0.0, 0.0);
            for j in 0..6 {
                for k in 0..6 {
                    let same = lab[j] == lab[k];
                    let l = guide_pair_loss(&pose[j], &layer[k], same, 2.0).unwrap();
                    if same {
                        ps += l;
                        pc += 1.0;
                    } else {
                        ns += l;
                        nc += 1.0;
                    }
                }
            }
            expected.push(ps / pc + ns / nc);
        }
        for (a, b) in per_layer.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((total - expected.iter().sum::<f64>() / 3.0).abs() < 1e-9);
    }

    #[test]
    fn guide_is_zero_for_identical_single_distribution_within_identity() {
        let p = prob(&[0.1, 0.2, 0.7]);
        let pose = vec![p.clone(); 4];
        let layers = vec![vec![p.clone(); 4]];
        let lab = labels(&[0, 0, 1, 1]);
        let (_, per_layer) = guide_loss_batch(&pose, &layers, &lab, 2.0).unwrap();
        // positive pairs contribute nothing; negatives sit at the full 2m
        assert!((per_layer[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn guide_rejects_single_identity_batch() {
        let pose = Matrix::from_vec(2, 2, vec![0.5; 4]);
        let l = BatchLabels(vec![0, 0]);
        assert!(guide_loss_with_grad(&pose, &[pose.clone()], &l, 2.0).is_err());
    }

    #[test]
    fn guide_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let lab = labels(&[0, 0, 1, 1]);
        let pose_v = random_probs(&mut r, 4, 3);
        let pose = Matrix::from_vec(4, 3, pose_v.iter().flat_map(|p| p.probs().to_vec()).collect());
        let logits: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let value = |logits: &[f64]| -> (f64, Vec<f64>) {
            let caches: Vec<_> = logits.chunks(3).map(|c| softmax_cached(c, 2.0).unwrap()).collect();
            let feat = Matrix::from_vec(4, 3, caches.iter().flat_map(|c| c.probs().to_vec()).collect());
            let out = guide_loss_with_grad(&pose, &[feat], &lab, 0.1).unwrap();
            let g: Vec<f64> = caches
                .iter()
                .enumerate()
                .flat_map(|(i, c)| c.backward(out.grads[0].row(i)))
                .collect();
            (out.total, g)
        };
        let (_, analytic) = value(&logits);
        for i in 0..12 {
            let h = 1e-6;
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp[i] += h;
            lm[i] -= h;
            let num = (value(&lp).0 - value(&lm).0) / (2.0 * h);
            assert!((num - analytic[i]).abs() < 1e-7, "{i}: {num} vs {}", analytic[i]);
        }
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let lab = labels(&[0, 0, 1, 1, 2, 2]);
        let e = Matrix::from_vec(6, 3, (0..18).map(|_| r.random_range(-0.3..0.3)).collect());
        let (_, g) = triplet_batch_hard_with_grad(&e, &lab, 0.2).unwrap();
        for i in 0..18 {
            let h = 1e-7;
            let mut ep = e.clone();
            let mut em = e.clone();
            ep.data[i] += h;
            em.data[i] -= h;
            let num = (triplet_batch_hard(&ep, &lab, 0.2).unwrap() - triplet_batch_hard(&em, &lab, 0.2).unwrap()) / (2.0 * h);
            assert!((num - g.data[i]).abs() < 1e-6, "{i}: {num} vs {}", g.data[i]);
        }
    }

    #[test]
    fn combined_arithmetic() {
        assert!((combined_loss(0.2, 1.0, vec![1.0], 0.8).combined - 1.0).abs() < 1e-12);
        assert_eq!(combined_loss(0.37, 5.0, vec![], 0.0).combined, 0.37);
        assert_eq!(combined_loss(0.0, 2.5, vec![], 1.0).combined, 2.5);
    }

    fn prob_strategy(d: usize) -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(-4.0f64..4.0, d)
            .prop_map(|l| ProbVector::new(softmax_cached(&l, 2.0).unwrap().probs().to_vec()).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn batch_hard_equals_exhaustive_mining(
            ids in 2usize..=4,
            per in 2usize..=3,
            dim in 1usize..=4,
            seed in any::<u64>(),
        ) {
            let n = ids * per;
            prop_assume!(n <= 12);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let e = Matrix::from_vec(n, dim, (0..n * dim).map(|_| r.random_range(-2.0..2.0)).collect());
            let lab: Vec<u32> = (0..n).map(|i| (i / per) as u32).collect();
            let got = triplet_batch_hard(&e, &labels(&lab), 0.2).unwrap();
            prop_assert!((got - brute_force_triplet(&e, &lab, 0.2)).abs() < 1e-9);
            prop_assert!(got >= 0.0 && got.is_finite());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn pair_loss_is_symmetric_finite_nonnegative(p in prob_strategy(5), q in prob_strategy(5), same in any::<bool>()) {
            let a = guide_pair_loss(&p, &q, same, 2.0).unwrap();
            let b = guide_pair_loss(&q, &p, same, 2.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0 && a.is_finite());
        }

        #[test]
        fn larger_margin_never_lowers_dissimilar_loss(p in prob_strategy(4), q in prob_strategy(4), m in 0.01f64..5.0, dm in 0.0f64..3.0) {
            let lo = guide_pair_loss(&p, &q, false, m).unwrap();
            let hi = guide_pair_loss(&p, &q, false, m + dm).unwrap();
            prop_assert!(hi >= lo);
        }
    }
}
