//! Embedding and probability-vector types, tempered softmax and KL divergence.

use serde::{Deserialize, Serialize};

use crate::error::{PgdsError, Result};

/// Floor applied to probabilities before any logarithm.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PgdsError::domain(format!(
                "embedding entry {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A point on the probability simplex with every entry at least `PROB_EPS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates an existing distribution. Entries below `PROB_EPS` are
    /// clamped and the vector renormalised.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(PgdsError::domain("empty probability vector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(PgdsError::domain(
                "probability entries must be finite and non-negative",
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(PgdsError::domain(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(clamp_renormalize(probs).0))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn clamp_renormalize(mut probs: Vec<f64>) -> (Vec<f64>, f64) {
    let mut sum = 0.0;
    for p in probs.iter_mut() {
        *p = p.max(PROB_EPS);
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    (probs, sum)
}

/// Intermediate values of a tempered softmax, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SoftmaxCache {
    /// Softmax output before clamping.
    raw: Vec<f64>,
    /// Sum of the clamped entries (the renormalisation divisor).
    clamped_sum: f64,
    /// Final clamped, renormalised output.
    out: Vec<f64>,
    temperature: f64,
}

impl SoftmaxCache {
    pub fn probs(&self) -> &[f64] {
        &self.out
    }

    /// Maps dL/d(output) to dL/d(logits).
    pub fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        let dot: f64 = grad_out.iter().zip(&self.out).map(|(g, r)| g * r).sum();
        // through renormalisation and the clamp
        let grad_raw: Vec<f64> = grad_out
            .iter()
            .zip(&self.raw)
            .map(|(g, &q)| {
                if q > PROB_EPS {
                    (g - dot) / self.clamped_sum
                } else {
                    0.0
                }
            })
            .collect();
        let dot_raw: f64 = grad_raw.iter().zip(&self.raw).map(|(g, q)| g * q).sum();
        grad_raw
            .iter()
            .zip(&self.raw)
            .map(|(g, q)| q * (g - dot_raw) / self.temperature)
            .collect()
    }
}

/// Tempered softmax over raw slices, returning the cache used for gradients.
pub fn softmax_cached(logits: &[f64], temperature: f64) -> Result<SoftmaxCache> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(PgdsError::domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(PgdsError::domain("empty logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(PgdsError::domain("non-finite logit"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut raw: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter_mut().for_each(|q| *q /= total);
    let (out, clamped_sum) = clamp_renormalize(raw.clone());
    Ok(SoftmaxCache {
        raw,
        clamped_sum,
        out,
        temperature,
    })
}

/// `exp(z_k / tau) / sum_j exp(z_j / tau)`, clamped at `PROB_EPS` and renormalised.
pub fn softmax_with_temperature(logits: &EmbeddingVector, temperature: f64) -> Result<ProbVector> {
    let cache = softmax_cached(logits.values(), temperature)?;
    Ok(ProbVector(cache.out))
}

/// KL(p | q) with natural logarithm on raw slices. Callers guarantee clamped inputs.
pub(crate) fn kl_slices(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&pk, &qk)| pk * (pk.ln() - qk.ln()))
        .sum();
    kl.max(0.0)
}

/// `sum_k p_k ln(p_k / q_k)`, floored at zero to absorb rounding.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(PgdsError::domain(format!(
            "dimension mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_slices(p.probs(), q.probs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let p = softmax_with_temperature(&emb(&[0.0, 0.0, 0.0]), 2.0).unwrap();
        for &x in p.probs() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_logit_case() {
        let p = softmax_with_temperature(&emb(&[0.0, 2.0]), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((p.probs()[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((p.probs()[0] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(EmbeddingVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(softmax_cached(&[0.0, f64::INFINITY], 2.0).is_err());
        assert!(softmax_cached(&[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);
        let q = ProbVector::new(vec![0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(&half, &q).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_guard_case_is_finite() {
        let p = ProbVector::new(vec![1.0 - PROB_EPS, PROB_EPS]).unwrap();
        let q = ProbVector::new(vec![PROB_EPS, 1.0 - PROB_EPS]).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!(kl.is_finite() && kl > 0.0);
        let one_hot = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert!(kl_divergence(&one_hot, &q).unwrap().is_finite());
    }

    #[test]
    fn kl_dimension_mismatch() {
        let a = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let b = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(kl_divergence(&a, &b), Err(PgdsError::Domain(_))));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let weights = [0.9, -0.4, 1.3, 0.2];
        let f = |z: &[f64]| -> f64 {
            let c = softmax_cached(z, 2.0).unwrap();
            c.probs().iter().zip(&weights).map(|(p, w)| p.ln() * w).sum()
        };
        let cache = softmax_cached(&logits, 2.0).unwrap();
        let g_out: Vec<f64> = cache
            .probs()
            .iter()
            .zip(&weights)
            .map(|(p, w)| w / p)
            .collect();
        let g = cache.backward(&g_out);
        for i in 0..logits.len() {
            let h = 1e-6;
            let mut a = logits;
            let mut b = logits;
            a[i] += h;
            b[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8, "{i}: {num} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn softmax_lands_on_simplex(logits in prop::collection::vec(-50.0f64..50.0, 1..64), tau in 0.1f64..10.0) {
            let p = softmax_with_temperature(&emb(&logits), tau).unwrap();
            let sum: f64 = p.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(p.probs().iter().all(|&x| x > 0.0 && x <= 1.0));
        }

        #[test]
        fn softmax_is_scale_consistent(logits in prop::collection::vec(-10.0f64..10.0, 2..32), c in 0.1f64..10.0) {
            let a = softmax_with_temperature(&emb(&logits), 2.0).unwrap();
            let scaled: Vec<f64> = logits.iter().map(|z| z * c).collect();
            let b = softmax_with_temperature(&emb(&scaled), 2.0 * c).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn gibbs_inequality(a in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-5.0f64..5.0, 8)) {
            let p = softmax_with_temperature(&emb(&a), 1.0).unwrap();
            let q = softmax_with_temperature(&emb(&b), 1.0).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            let max_diff = p.probs().iter().zip(q.probs()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if max_diff >= 1e-7 {
                prop_assert!(kl > 0.0);
            }
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }
    }
}
