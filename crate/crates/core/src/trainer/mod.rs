//! Training loop, learning-rate schedule and checkpoints.

mod checkpoint;
mod model;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_human_encoder, load_pose_encoder, pose_parameter_hash, save_checkpoint,
    save_pose_encoder, ArchiveKind, FORMAT_VERSION,
};
pub use model::{ForwardRecord, PgdsModel};

use crate::config::PgdsConfig;
use crate::datagen::{augment, Dataset, PkBatch, PkSampler, Split};
use crate::encoders::PoseEncoder;
use crate::error::{PgdsError, Result};
use crate::image_tensor::ImageTensor;
use crate::losses::{BatchLabels, LossBreakdown};
use crate::nn::{clip_grad_norm, AdamW};
use crate::rng::{self, tag};

pub const CHECKPOINT_FILE: &str = "checkpoint.pgds";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.05;

/// Linear warmup over the first 5% of steps from `base_lr / 100` to
/// `base_lr`, then cosine decay back to `base_lr / 100`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    lr_schedule_with_warmup(step, total_steps, base_lr, DEFAULT_WARMUP_FRACTION)
}

pub fn lr_schedule_with_warmup(step: u64, total_steps: u64, base_lr: f64, warmup_fraction: f64) -> f64 {
    let floor = base_lr / 100.0;
    if total_steps == 0 {
        return floor;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = warmup_fraction * total;
    if step < warm {
        return floor + (base_lr - floor) * step / warm;
    }
    let progress = if total > warm { (step - warm) / (total - warm) } else { 1.0 };
    floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Optimizer and progress counters. Batch order and augmentation are derived
/// from `(seed, epoch, step)`, so no generator state needs saving.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    /// Learning rate used by the last step.
    pub lr: f64,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn new(model: &PgdsModel) -> Self {
        let sizes: Vec<usize> = model.trainable_params().iter().map(|p| p.len()).collect();
        Self {
            epoch: 0,
            step: 0,
            lr: 0.0,
            optimizer: AdamW::new(model.config.train.weight_decay, &sizes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub triplet: f64,
    pub guide: f64,
    pub guide_per_layer: Vec<f64>,
    pub combined: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    /// Also keep `epoch_NNN.pgds` next to the rolling checkpoint.
    pub keep_epoch_checkpoints: bool,
    /// Stop after this many completed epochs (the schedule still spans the
    /// configured epoch count).
    pub stop_after_epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    /// Mean combined loss of every epoch run in this invocation.
    pub epoch_mean_combined: Vec<f64>,
    pub pose_hash_before: String,
    pub pose_hash_after: String,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    epoch: u64,
    batch_indices: &'a [usize],
    image_paths: Vec<&'a str>,
    breakdown: &'a LossBreakdown,
}

struct Trainer<'a> {
    model: PgdsModel,
    state: TrainState,
    dataset: &'a Dataset,
    train_indices: Vec<usize>,
    sampler: PkSampler,
    total_steps: u64,
}

impl<'a> Trainer<'a> {
    fn new(model: PgdsModel, state: TrainState, dataset: &'a Dataset) -> Result<Self> {
        let cfg = &model.config;
        let (h, w) = dataset.image_size();
        if (h, w) != (cfg.model.image_height, cfg.model.image_width) {
            return Err(PgdsError::domain(format!(
                "dataset images are {h}x{w}, config expects {}x{}",
                cfg.model.image_height, cfg.model.image_width
            )));
        }
        let train_indices = dataset.indices(Split::Train);
        let sampler = PkSampler::new(
            &dataset.records_at(&train_indices),
            cfg.train.identities_per_batch,
            cfg.train.instances_per_identity,
            cfg.seed,
        )?;
        let total_steps = (0..cfg.train.epochs as u64)
            .map(|e| sampler.epoch(e).len() as u64)
            .sum();
        Ok(Self {
            model,
            state,
            dataset,
            train_indices,
            sampler,
            total_steps,
        })
    }

    fn batch_tensor(&self, batch: &PkBatch) -> Result<(Vec<usize>, crate::nn::Tensor4)> {
        let cfg = &self.model.config;
        let records: Vec<usize> = batch.indices.iter().map(|&i| self.train_indices[i]).collect();
        let images: Vec<ImageTensor> = records
            .iter()
            .enumerate()
            .map(|(slot, &r)| {
                let img = &self.dataset.images[r];
                if cfg.train.augment {
                    augment(img, rng::derive_seed(cfg.seed, &[tag::AUGMENT, self.state.step, slot as u64]))
                } else {
                    img.clone()
                }
            })
            .collect();
        let refs: Vec<&ImageTensor> = images.iter().collect();
        Ok((records, ImageTensor::batch(&refs)?))
    }

    fn step(&mut self, batch: &PkBatch, out_dir: &Path) -> Result<StepLog> {
        let lr = lr_schedule_with_warmup(
            self.state.step,
            self.total_steps,
            self.model.config.train.base_lr,
            self.model.config.train.warmup_fraction,
        );
        let (records, x) = self.batch_tensor(batch)?;
        let labels = BatchLabels::new(batch.labels.clone())?;
        let rec = self.model.forward(&x, &labels)?;
        let b = &rec.breakdown;
        let finite = b.combined.is_finite() && b.guide_per_layer.iter().all(|v| v.is_finite());
        if !finite {
            return Err(self.nan_abort(&records, b, out_dir));
        }
        self.model.zero_grad();
        self.model.backward(&rec);
        self.model.commit_running_stats(&rec);
        let clip = self.model.config.train.grad_clip;
        let mut params = self.model.trainable_params_mut();
        let grad_norm = clip_grad_norm(&mut params, clip);
        if !grad_norm.is_finite() {
            drop(params);
            return Err(self.nan_abort(&records, &rec.breakdown, out_dir));
        }
        self.state.optimizer.step(&mut params, lr)?;
        let log = StepLog {
            step: self.state.step,
            epoch: self.state.epoch,
            lr,
            triplet: b.triplet,
            guide: b.guide,
            guide_per_layer: b.guide_per_layer.clone(),
            combined: b.combined,
            grad_norm,
        };
        self.state.step += 1;
        self.state.lr = lr;
        Ok(log)
    }

    fn nan_abort(&self, records: &[usize], breakdown: &LossBreakdown, out_dir: &Path) -> PgdsError {
        let dump = NanDump {
            step: self.state.step,
            epoch: self.state.epoch,
            batch_indices: records,
            image_paths: records.iter().map(|&r| self.dataset.records[r].image_path.as_str()).collect(),
            breakdown,
        };
        let path = out_dir.join(NAN_DUMP_FILE);
        if let Ok(text) = serde_json::to_string_pretty(&dump) {
            let _ = std::fs::write(&path, text);
        }
        PgdsError::NonFinite(format!(
            "loss or gradient became non-finite at step {}; batch record indices {:?}; dump written to {}",
            self.state.step,
            records,
            path.display()
        ))
    }

    fn run(mut self, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir).map_err(|e| PgdsError::io(out_dir, e))?;
        let (trainable, frozen) = self.model.assert_partition()?;
        let hash_before = pose_parameter_hash(&self.model.pose);
        let log_path = out_dir.join(LOG_FILE);
        let mut log = open_log(&log_path, self.state.step)?;
        let ckpt = out_dir.join(CHECKPOINT_FILE);
        let epochs = self.model.config.train.epochs as u64;
        let stop = opts.stop_after_epoch.unwrap_or(epochs).min(epochs);
        let mut epoch_mean = Vec::new();
        while self.state.epoch < stop {
            let batches = self.sampler.epoch(self.state.epoch);
            let mut sum = 0.0;
            for batch in &batches {
                let entry = self.step(batch, out_dir)?;
                sum += entry.combined;
                let line = serde_json::to_string(&entry).map_err(|e| PgdsError::Parse(e.to_string()))?;
                writeln!(log, "{line}").map_err(|e| PgdsError::io(&log_path, e))?;
            }
            let mean = sum / batches.len().max(1) as f64;
            info!("epoch {}: mean combined loss {mean:.5}", self.state.epoch);
            epoch_mean.push(mean);
            self.state.epoch += 1;
            log.flush().map_err(|e| PgdsError::io(&log_path, e))?;
            save_checkpoint(&ckpt, &self.model, &self.state)?;
            if opts.keep_epoch_checkpoints {
                save_checkpoint(&out_dir.join(format!("epoch_{:03}.pgds", self.state.epoch)), &self.model, &self.state)?;
            }
        }
        if !ckpt.exists() {
            save_checkpoint(&ckpt, &self.model, &self.state)?;
        }
        let hash_after = pose_parameter_hash(&self.model.pose);
        Ok(TrainOutcome {
            checkpoint: ckpt,
            log: log_path,
            steps: self.state.step,
            epoch_mean_combined: epoch_mean,
            pose_hash_before: hash_before,
            pose_hash_after: hash_after,
            trainable_params: trainable,
            frozen_params: frozen,
        })
    }
}

/// Opens the step log, keeping only entries before `from_step`.
fn open_log(path: &Path, from_step: u64) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if from_step > 0 && path.is_file() {
        let f = File::open(path).map_err(|e| PgdsError::io(path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| PgdsError::io(path, e))?;
            let entry: StepLog = serde_json::from_str(&line).map_err(|e| PgdsError::Parse(format!("{}: {e}", path.display())))?;
            if entry.step < from_step {
                kept.push(line);
            }
        }
    }
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| PgdsError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for line in kept {
        writeln!(w, "{line}").map_err(|e| PgdsError::io(path, e))?;
    }
    Ok(w)
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let f = File::open(path).map_err(|e| PgdsError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| PgdsError::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| PgdsError::Parse(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Trains a fresh human encoder and projectors against a frozen pose encoder.
pub fn train(
    config: &PgdsConfig,
    dataset: &Dataset,
    pose: PoseEncoder,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let model = PgdsModel::new(config.clone(), pose)?;
    let state = TrainState::new(&model);
    Trainer::new(model, state, dataset)?.run(out_dir, opts)
}

/// Continues training from a checkpoint written by [`train`].
pub fn resume(checkpoint: &Path, dataset: &Dataset, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let (model, state) = load_checkpoint(checkpoint)?;
    Trainer::new(model, state, dataset)?.run(out_dir, opts)
}
