use crate::config::ModelConfig;
use crate::error::{PgdsError, Result};
use crate::image_tensor::ImageTensor;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, BatchNorm, BnCache,
    Conv2d, ConvCache, ExecTrace, Linear, Matrix, Module, Param, Tensor4,
};
use crate::rng::{self, tag};
use crate::simplex::EmbeddingVector;

pub const NUM_STAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers.
    Train,
    /// Running statistics; a pure function of weights and input.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    conv: Conv2d,
    bn: BatchNorm,
}

/// Five stride-2 convolutional stages followed by global pooling and a
/// linear embedding head. Stage `i` maps to `(H / 2^(i+1)) x (W / 2^(i+1)) x C_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanEncoder {
    stages: Vec<Stage>,
    head: Linear,
    channels: Vec<usize>,
    embedding_dim: usize,
}

/// The five stage outputs and the final embedding of a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatureSet {
    pub features: Vec<Tensor4>,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone)]
struct HumanCache {
    conv: Vec<ConvCache>,
    bn: Vec<BnCache>,
    pooled: Matrix,
}

/// Output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct HumanPass {
    /// Post-activation output of every stage.
    pub stages: Vec<Tensor4>,
    /// One embedding row per image.
    pub embedding: Matrix,
    cache: Option<HumanCache>,
}

impl HumanEncoder {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[tag::HUMAN_INIT]);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_ch = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            stages.push(Stage {
                conv: Conv2d::new(format!("human.stage{i}.conv"), in_ch, c, 3, 2, 1, false, &mut r),
                bn: BatchNorm::new(format!("human.stage{i}.bn"), c),
            });
            in_ch = c;
        }
        let head = Linear::new("human.head", in_ch, cfg.embedding_dim, &mut r);
        Self {
            stages,
            head,
            channels: cfg.channels.clone(),
            embedding_dim: cfg.embedding_dim,
        }
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn forward(
        &self,
        x: &Tensor4,
        mode: Mode,
        keep_cache: bool,
        mut trace: Option<&mut ExecTrace>,
    ) -> Result<HumanPass> {
        if x.c != 3 || x.h == 0 || x.w == 0 || x.h % 32 != 0 || x.w % 32 != 0 {
            return Err(PgdsError::domain(format!(
                "human encoder expects 3 x H x W input with H, W multiples of 32, got {}x{}x{}",
                x.c, x.h, x.w
            )));
        }
        let train = mode == Mode::Train;
        let mut outs = Vec::with_capacity(NUM_STAGES);
        let mut conv_caches = Vec::new();
        let mut bn_caches = Vec::new();
        let mut cur: &Tensor4 = x;
        for st in &self.stages {
            let (y, cc) = st.conv.forward(cur, keep_cache, trace.as_deref_mut());
            let (mut z, bc) = st.bn.forward(&y, train, trace.as_deref_mut());
            relu_inplace(&mut z.data);
            if keep_cache {
                conv_caches.extend(cc);
                bn_caches.push(bc);
            }
            outs.push(z);
            cur = outs.last().expect("just pushed");
        }
        let pooled = global_avg_pool(cur);
        let embedding = self.head.forward(&pooled, trace.as_deref_mut());
        let cache = keep_cache.then_some(HumanCache {
            conv: conv_caches,
            bn: bn_caches,
            pooled,
        });
        Ok(HumanPass {
            stages: outs,
            embedding,
            cache,
        })
    }

    /// Folds the batch statistics of a training-mode pass into the running averages.
    pub fn commit_running_stats(&mut self, pass: &HumanPass) {
        if let Some(cache) = &pass.cache {
            for (st, bc) in self.stages.iter_mut().zip(&cache.bn) {
                st.bn.commit(bc);
            }
        }
    }

    /// Backpropagates `d_embedding` plus optional gradients injected directly
    /// at stage outputs. Returns the input gradient when requested.
    pub fn backward(
        &mut self,
        pass: &HumanPass,
        d_embedding: &Matrix,
        d_stages: &[Option<Tensor4>],
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor4> {
        let cache = pass
            .cache
            .as_ref()
            .expect("backward requires a forward pass with keep_cache");
        let d_pooled = self.head.backward(&cache.pooled, d_embedding, param_grads);
        let last = &pass.stages[NUM_STAGES - 1];
        let mut grad = global_avg_pool_backward(&d_pooled, last.h, last.w);
        let mut input = None;
        for i in (0..NUM_STAGES).rev() {
            if let Some(Some(extra)) = d_stages.get(i) {
                grad.add_assign(extra);
            }
            relu_backward(&pass.stages[i].data, &mut grad.data);
            let st = &mut self.stages[i];
            let d_pre = st.bn.backward(&cache.bn[i], &grad, param_grads);
            let need_dx = i > 0 || input_grad;
            let dx = st.conv.backward(&cache.conv[i], &d_pre, param_grads, need_dx);
            match dx {
                Some(dx) if i > 0 => grad = dx,
                other => input = other,
            }
        }
        input
    }

    /// Eval-mode forward of one image, exposing every stage.
    pub fn human_forward(&self, image: &ImageTensor, mode: Mode) -> Result<MultiScaleFeatureSet> {
        let x = ImageTensor::batch(&[image])?;
        let pass = self.forward(&x, mode, false, None)?;
        Ok(MultiScaleFeatureSet {
            features: pass.stages,
            embedding: EmbeddingVector::new(pass.embedding.data)?,
        })
    }

    /// Eval-mode embeddings of a list of images, in chunks of `chunk`.
    pub fn embed(&self, images: &[&ImageTensor], chunk: usize, mut trace: Option<&mut ExecTrace>) -> Result<Matrix> {
        let mut out = Matrix::zeros(images.len(), self.embedding_dim);
        for (c, part) in images.chunks(chunk.max(1)).enumerate() {
            let x = ImageTensor::batch(part)?;
            let pass = self.forward(&x, Mode::Eval, false, trace.as_deref_mut())?;
            let start = c * chunk.max(1) * self.embedding_dim;
            out.data[start..start + pass.embedding.data.len()].copy_from_slice(&pass.embedding.data);
        }
        Ok(out)
    }
}

impl Module for HumanEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for st in &self.stages {
            v.extend(st.conv.params());
            v.extend(st.bn.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for st in &mut self.stages {
            v.extend(st.conv.params_mut());
            v.extend(st.bn.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Param> {
        self.stages.iter().flat_map(|s| s.bn.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Param> {
        self.stages.iter_mut().flat_map(|s| s.bn.buffers_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: vec![2, 3, 4, 5, 6],
            embedding_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn test_image(h: usize, w: usize, phase: f64) -> ImageTensor {
        let data = (0..h * w * 3)
            .map(|i| 0.5 + 0.4 * ((i as f64) * 0.013 + phase).sin())
            .collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn desk_scale_stage_shapes() {
        let enc = HumanEncoder::new(&ModelConfig::default(), 0);
        let f = enc.human_forward(&test_image(96, 32, 0.0), Mode::Eval).unwrap();
        let shapes: Vec<_> = f.features.iter().map(|t| (t.h, t.w, t.c)).collect();
        assert_eq!(
            shapes,
            vec![(48, 16, 8), (24, 8, 16), (12, 4, 32), (6, 2, 64), (3, 1, 128)]
        );
        assert_eq!(f.embedding.len(), 128);
    }

    #[test]
    fn eval_is_bitwise_deterministic() {
        let enc = HumanEncoder::new(&ModelConfig::default(), 1);
        let img = test_image(96, 32, 0.3);
        let a = enc.human_forward(&img, Mode::Eval).unwrap();
        let b = enc.human_forward(&img, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_does_not_depend_on_batch_composition_in_eval() {
        let enc = HumanEncoder::new(&tiny_cfg(), 2);
        let a = test_image(64, 32, 0.1);
        let b = test_image(64, 32, 0.9);
        let both = enc.embed(&[&a, &b], 8, None).unwrap();
        let single = enc.embed(&[&b], 8, None).unwrap();
        assert_eq!(both.row(1), single.row(0));
    }

    #[test]
    fn wrong_shape_is_a_domain_error() {
        let enc = HumanEncoder::new(&tiny_cfg(), 0);
        let x = Tensor4::zeros(1, 3, 40, 32);
        assert!(matches!(enc.forward(&x, Mode::Eval, false, None), Err(PgdsError::Domain(_))));
        let x = Tensor4::zeros(1, 1, 32, 32);
        assert!(enc.forward(&x, Mode::Eval, false, None).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut enc = HumanEncoder::new(&tiny_cfg(), 3);
        let img = test_image(32, 32, 0.5);
        let x = ImageTensor::batch(&[&img]).unwrap();
        let objective = |enc: &HumanEncoder, x: &Tensor4| -> f64 {
            let p = enc.forward(x, Mode::Eval, false, None).unwrap();
            p.embedding.data.iter().map(|v| v * v).sum::<f64>()
        };
        let pass = enc.forward(&x, Mode::Eval, true, None).unwrap();
        let mut d = pass.embedding.clone();
        d.scale(2.0);
        let dx = enc.backward(&pass, &d, &[], false, true).unwrap();
        for idx in [0usize, 100, 777, 2000, 3071] {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[idx] += h;
            xm.data[idx] -= h;
            let num = (objective(&enc, &xp) - objective(&enc, &xm)) / (2.0 * h);
            assert!((num - dx.data[idx]).abs() < 1e-6 * (1.0 + num.abs()), "{idx}: {num} vs {}", dx.data[idx]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn shape_contract_holds(hm in 1usize..=4, wm in 1usize..=2) {
            let (h, w) = (32 * hm, 32 * wm);
            let enc = HumanEncoder::new(&tiny_cfg(), 0);
            let f = enc.human_forward(&test_image(h, w, 0.0), Mode::Eval).unwrap();
            for (i, t) in f.features.iter().enumerate() {
                prop_assert_eq!(t.h, h >> (i + 1));
                prop_assert_eq!(t.w, w >> (i + 1));
                prop_assert_eq!(t.c, tiny_cfg().channels[i]);
            }
        }
    }
}
