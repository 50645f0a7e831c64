use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::PoseConfig;
use crate::datagen::{Dataset, KeypointHeatmap, Split, HEATMAP_STRIDE, JOINT_NAMES};
use crate::error::{PgdsError, Result};
use crate::image_tensor::ImageTensor;
use crate::nn::{
    global_avg_pool, relu_backward, relu_inplace, AdamW, Conv2d, ConvCache, ExecTrace, Linear,
    Matrix, Module, Param, Tensor4,
};
use crate::rng::{self, tag};

const FIT_CHUNK: usize = 32;
/// Normalised row and column coordinates appended to the RGB input.
const COORD_CHANNELS: usize = 2;

/// Centres the RGB planes and appends coordinate planes in [-1, 1].
fn with_coordinates(x: &Tensor4) -> Tensor4 {
    let plane = x.h * x.w;
    let mut out = Tensor4::zeros(x.n, 3 + COORD_CHANNELS, x.h, x.w);
    for i in 0..x.n {
        let src = x.image(i);
        let dst = out.image_mut(i);
        for (d, s) in dst[..3 * plane].iter_mut().zip(src) {
            *d = 2.0 * s - 1.0;
        }
        for y in 0..x.h {
            for xx in 0..x.w {
                let p = y * x.w + xx;
                dst[3 * plane + p] = 2.0 * (y as f64 + 0.5) / x.h as f64 - 1.0;
                dst[4 * plane + p] = 2.0 * (xx as f64 + 0.5) / x.w as f64 - 1.0;
            }
        }
    }
    out
}

/// Convolutional keypoint regressor used as the frozen teacher.
///
/// Two stride-2 convolutions bring the input to a quarter of its resolution,
/// a third convolution refines, and a 1x1 convolution emits one confidence
/// map per joint. The pose embedding is a fixed linear map of the pooled
/// confidence maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEncoder {
    convs: Vec<Conv2d>,
    head: Conv2d,
    projection: Linear,
    joints: usize,
    frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseOutput {
    /// N x J x H/4 x W/4 confidence maps.
    pub confidence: Tensor4,
    /// N x D pose embeddings.
    pub embedding: Matrix,
}

struct MapCache {
    convs: Vec<ConvCache>,
    acts: Vec<Tensor4>,
    head: ConvCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_train_mse: Vec<f64>,
    pub validation_mse: f64,
    pub untrained_validation_mse: f64,
    pub train_images: usize,
    pub validation_images: usize,
}

impl PoseEncoder {
    pub fn new(cfg: &PoseConfig, embedding_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[tag::POSE_INIT]);
        let mut in_ch = 3 + COORD_CHANNELS;
        let mut convs = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            let s = if i < 2 { 2 } else { 1 };
            convs.push(Conv2d::new(format!("pose.conv{i}"), in_ch, c, 3, s, 1, true, &mut r));
            in_ch = c;
        }
        let head = Conv2d::new("pose.head", in_ch, cfg.joints, 1, 1, 0, true, &mut r);
        let mut projection = Linear::new("pose.projection", cfg.joints, embedding_dim, &mut r);
        projection.weight.value.fill(0.0);
        Self {
            convs,
            head,
            projection,
            joints: cfg.joints,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection.out_dim
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.c != 3 || x.h == 0 || x.w == 0 || x.h % HEATMAP_STRIDE != 0 || x.w % HEATMAP_STRIDE != 0 {
            return Err(PgdsError::domain(format!(
                "pose encoder expects 3 x H x W input with H, W multiples of {HEATMAP_STRIDE}, got {}x{}x{}",
                x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    fn maps(&self, x: &Tensor4, keep: bool, mut trace: Option<&mut ExecTrace>) -> (Tensor4, Option<MapCache>) {
        let x = &with_coordinates(x);
        let mut caches = Vec::new();
        let mut acts: Vec<Tensor4> = Vec::new();
        for conv in &self.convs {
            let input = acts.last().unwrap_or(x);
            let (mut y, c) = conv.forward(input, keep, trace.as_deref_mut());
            relu_inplace(&mut y.data);
            caches.extend(c);
            acts.push(y);
        }
        let (out, hc) = self.head.forward(acts.last().unwrap_or(x), keep, trace.as_deref_mut());
        let cache = hc.map(|head| MapCache {
            convs: caches,
            acts,
            head,
        });
        (out, cache)
    }

    /// Confidence maps and pose embedding of a batch. Requires the frozen state.
    pub fn pose_forward(&self, x: &Tensor4, mut trace: Option<&mut ExecTrace>) -> Result<PoseOutput> {
        if !self.frozen {
            return Err(PgdsError::State(
                "pose encoder must be pretrained and frozen before use".into(),
            ));
        }
        self.check_input(x)?;
        let (confidence, _) = self.maps(x, false, trace.as_deref_mut());
        let pooled = global_avg_pool(&confidence);
        let embedding = self.projection.forward(&pooled, trace);
        Ok(PoseOutput {
            confidence,
            embedding,
        })
    }

    /// Single-image convenience wrapper around [`PoseEncoder::pose_forward`].
    pub fn pose_forward_image(&self, image: &ImageTensor) -> Result<(Tensor4, Vec<f64>)> {
        let out = self.pose_forward(&ImageTensor::batch(&[image])?, None)?;
        Ok((out.confidence, out.embedding.data))
    }

    /// Applies an optimizer step to the regressor weights. Rejected once frozen.
    pub fn apply_update(&mut self, opt: &mut AdamW, lr: f64) -> Result<()> {
        if self.frozen {
            return Err(PgdsError::State("pose encoder is frozen; parameter updates are rejected".into()));
        }
        let mut params = self.regressor_params_mut();
        opt.step(&mut params, lr)
    }

    fn regressor_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.extend(c.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn regressor_sizes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.convs.iter().flat_map(|c| c.params()).map(|p| p.len()).collect();
        v.extend(self.head.params().iter().map(|p| p.len()));
        v
    }

    /// Per-pixel mean squared error against `targets`; accumulates gradients
    /// when `grad`.
    fn mse_step(&mut self, x: &Tensor4, targets: &[f64], grad: bool) -> f64 {
        let (pred, cache) = self.maps(x, grad, None);
        let n = pred.data.len() as f64;
        let mut d = Tensor4::zeros(pred.n, pred.c, pred.h, pred.w);
        let mut loss = 0.0;
        for ((g, p), t) in d.data.iter_mut().zip(&pred.data).zip(targets) {
            let e = p - t;
            loss += e * e;
            *g = 2.0 * e / n;
        }
        if let Some(cache) = cache {
            let mut grad_t = self
                .head
                .backward(&cache.head, &d, true, true)
                .expect("input gradient requested");
            for i in (0..self.convs.len()).rev() {
                relu_backward(&cache.acts[i].data, &mut grad_t.data);
                let dx = self.convs[i].backward(&cache.convs[i], &grad_t, true, i > 0);
                if let Some(dx) = dx {
                    grad_t = dx;
                }
            }
        }
        loss / n
    }

    fn heatmap_mse(&mut self, images: &[&ImageTensor], maps: &[&KeypointHeatmap]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (imgs, hms) in images.chunks(FIT_CHUNK).zip(maps.chunks(FIT_CHUNK)) {
            let x = ImageTensor::batch(imgs)?;
            let t: Vec<f64> = hms.iter().flat_map(|h| h.to_chw()).collect();
            total += self.mse_step(&x, &t, false) * t.len() as f64;
            count += t.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Sets the fixed projection from pooled statistics of `images`: per-joint
    /// z-scoring followed by a seeded Gaussian projection scaled by `gain`.
    fn calibrate_projection(&mut self, images: &[&ImageTensor], gain: f64, seed: u64) -> Result<()> {
        let j = self.joints;
        let mut mean = vec![0.0; j];
        let mut sq = vec![0.0; j];
        let mut n = 0.0_f64;
        for part in images.chunks(FIT_CHUNK) {
            let (maps, _) = self.maps(&ImageTensor::batch(part)?, false, None);
            let pooled = global_avg_pool(&maps);
            for r in 0..pooled.rows {
                for (k, v) in pooled.row(r).iter().enumerate() {
                    mean[k] += v;
                    sq[k] += v * v;
                }
                n += 1.0;
            }
        }
        let mut r = rng::stream(seed, &[tag::POSE_HEAD]);
        let d = self.projection.out_dim;
        let scale = gain / (j as f64).sqrt();
        let mut bias = vec![0.0; d];
        for k in 0..j {
            mean[k] /= n.max(1.0);
            let var = (sq[k] / n.max(1.0) - mean[k] * mean[k]).max(0.0);
            let inv = 1.0 / (var.sqrt() + 1e-6);
            for (row, b) in bias.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut r);
                let w = scale * z * inv;
                self.projection.weight.value[row * j + k] = w;
                *b -= w * mean[k];
            }
        }
        self.projection.bias.value = bias;
        Ok(())
    }
}

impl Module for PoseEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.convs.iter().flat_map(|c| c.params()).collect();
        v.extend(self.head.params());
        v.extend(self.projection.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.head.params_mut());
        v.extend(self.projection.params_mut());
        v
    }
}

/// Permutation exchanging left and right joints, applied to mirrored targets.
fn mirror_permutation() -> Vec<usize> {
    JOINT_NAMES
        .iter()
        .map(|name| {
            let swapped = if let Some(rest) = name.strip_prefix("l_") {
                format!("r_{rest}")
            } else if let Some(rest) = name.strip_prefix("r_") {
                format!("l_{rest}")
            } else {
                name.to_string()
            };
            JOINT_NAMES.iter().position(|n| *n == swapped).expect("symmetric joint set")
        })
        .collect()
}

/// Random channel permutation plus per-channel gain and offset, so the
/// regressor cannot key on clothing or background colours.
fn colour_jitter(img: &ImageTensor, r: &mut impl Rng) -> ImageTensor {
    let mut perm = [0usize, 1, 2];
    perm.shuffle(r);
    let gain: [f64; 3] = std::array::from_fn(|_| r.random_range(0.6..1.4));
    let offset: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.15..0.15));
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            out.set_pixel(y, x, std::array::from_fn(|c| (p[perm[c]] * gain[c] + offset[c]).clamp(0.0, 1.0)));
        }
    }
    out
}

fn mirrored(hm: &KeypointHeatmap, perm: &[usize]) -> KeypointHeatmap {
    let mut out = KeypointHeatmap::zeros(hm.height, hm.width, hm.joints);
    for y in 0..hm.height {
        for x in 0..hm.width {
            for j in 0..hm.joints {
                out.set(y, hm.width - 1 - x, perm[j], hm.get(y, x, j));
            }
        }
    }
    out
}

/// Fits the pose regressor to the ground-truth heatmaps of the training split,
/// calibrates the fixed embedding projection and returns the frozen encoder.
///
/// Held-out error is measured on the query and gallery images (or the last
/// tenth of the training images when the dataset has no test split).
pub fn pretrain_pose_encoder(
    dataset: &Dataset,
    cfg: &PoseConfig,
    embedding_dim: usize,
    epochs: usize,
    seed: u64,
) -> Result<(PoseEncoder, PretrainReport)> {
    let heatmaps = dataset
        .heatmaps
        .as_ref()
        .ok_or_else(|| PgdsError::domain("dataset provides no ground-truth keypoint heatmaps"))?;
    if cfg.joints != JOINT_NAMES.len() {
        return Err(PgdsError::domain(format!(
            "pose encoder is configured for {} joints but heatmaps carry {}",
            cfg.joints,
            JOINT_NAMES.len()
        )));
    }
    let mut train = dataset.indices(Split::Train);
    let mut val: Vec<usize> = (0..dataset.records.len())
        .filter(|&i| dataset.records[i].split != Split::Train)
        .collect();
    if val.is_empty() {
        let keep = train.len() - train.len() / 10;
        val = train.split_off(keep);
    }
    if train.is_empty() || val.is_empty() {
        return Err(PgdsError::domain("pose pretraining needs both training and held-out images"));
    }
    let perm = mirror_permutation();
    let mut enc = PoseEncoder::new(cfg, embedding_dim, seed);
    let val_imgs: Vec<&ImageTensor> = val.iter().map(|&i| &dataset.images[i]).collect();
    let val_maps: Vec<&KeypointHeatmap> = val.iter().map(|&i| &heatmaps[i]).collect();
    let untrained = enc.heatmap_mse(&val_imgs, &val_maps)?;

    let mut opt = AdamW::new(0.0, &enc.regressor_sizes());
    let mut epoch_train_mse = Vec::with_capacity(epochs);
    let bs = cfg.batch_size.max(1);
    for epoch in 0..epochs {
        let mut r = rng::stream(seed, &[tag::POSE_TRAIN, epoch as u64]);
        let mut order = train.clone();
        order.shuffle(&mut r);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::new();
            for &i in chunk {
                let img = colour_jitter(&dataset.images[i], &mut r);
                if r.random_bool(0.5) {
                    imgs.push(img.flip_horizontal());
                    targets.extend(mirrored(&heatmaps[i], &perm).to_chw());
                } else {
                    imgs.push(img);
                    targets.extend(heatmaps[i].to_chw());
                }
            }
            let refs: Vec<&ImageTensor> = imgs.iter().collect();
            let x = ImageTensor::batch(&refs)?;
            for p in enc.params_mut() {
                p.zero_grad();
            }
            let loss = enc.mse_step(&x, &targets, true);
            if !loss.is_finite() {
                return Err(PgdsError::NonFinite(format!("pose pretraining loss at epoch {epoch}")));
            }
            enc.apply_update(&mut opt, cfg.lr)?;
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches.max(1) as f64;
        info!("pose pretrain epoch {epoch}: train mse {mean:.5}");
        epoch_train_mse.push(mean);
    }
    let validation = enc.heatmap_mse(&val_imgs, &val_maps)?;
    let train_imgs: Vec<&ImageTensor> = train.iter().map(|&i| &dataset.images[i]).collect();
    enc.calibrate_projection(&train_imgs, cfg.embedding_gain, seed)?;
    for p in enc.params_mut() {
        p.zero_grad();
    }
    enc.frozen = true;
    info!("pose pretrain: held-out mse {validation:.5} (untrained {untrained:.5})");
    Ok((
        enc,
        PretrainReport {
            epoch_train_mse,
            validation_mse: validation,
            untrained_validation_mse: untrained,
            train_images: train.len(),
            validation_images: val.len(),
        },
    ))
}
