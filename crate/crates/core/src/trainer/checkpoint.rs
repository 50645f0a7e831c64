use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::PgdsModel;
use super::TrainState;
use crate::config::PgdsConfig;
use crate::encoders::{HumanEncoder, PoseEncoder};
use crate::error::{PgdsError, Result};
use crate::nn::{AdamW, Module, Param};

const MAGIC: &[u8; 8] = b"PGDSARCH";
pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "pgds-archive";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    PoseEncoder,
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    epoch: u64,
    step: u64,
    lr: f64,
    optimizer_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: ArchiveKind,
    config: PgdsConfig,
    pose_frozen: bool,
    progress: Option<Progress>,
    tensors: Vec<(String, usize)>,
}

fn write_archive(path: &Path, header: &Header, tensors: &[(&str, &[f64])]) -> Result<()> {
    let io = |e| PgdsError::io(path, e);
    let json = serde_json::to_vec(header).map_err(|e| PgdsError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, values) in tensors {
            for v in *values {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

fn read_archive(path: &Path) -> Result<(Header, BTreeMap<String, Vec<f64>>)> {
    let io = |e| PgdsError::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let bad = |m: &str| PgdsError::Checkpoint(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
    if &magic != MAGIC {
        return Err(bad("not a pgds archive"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(|_| bad("truncated file"))?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(|_| bad("truncated file"))?;
    let len = u64::from_le_bytes(u64b) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&format!("header: {e}")))?;
    if header.format != FORMAT_TAG || header.version != version {
        return Err(bad("format tag mismatch"));
    }
    let mut tensors = BTreeMap::new();
    let mut buf = [0u8; 8];
    for (name, n) in &header.tensors {
        let mut values = Vec::with_capacity(*n);
        for _ in 0..*n {
            r.read_exact(&mut buf).map_err(|_| bad(&format!("truncated tensor {name}")))?;
            values.push(f64::from_le_bytes(buf));
        }
        tensors.insert(name.clone(), values);
    }
    if r.read(&mut buf).map_err(io)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((header, tensors))
}

fn fill(params: Vec<&mut Param>, tensors: &mut BTreeMap<String, Vec<f64>>) -> Result<()> {
    for p in params {
        let v = tensors
            .remove(&p.name)
            .ok_or_else(|| PgdsError::Checkpoint(format!("missing tensor {}", p.name)))?;
        if v.len() != p.len() {
            return Err(PgdsError::Checkpoint(format!(
                "tensor {} has {} values, expected {}",
                p.name,
                v.len(),
                p.len()
            )));
        }
        p.value = v;
    }
    Ok(())
}

fn named<'a>(params: impl IntoIterator<Item = &'a Param>) -> Vec<(&'a str, &'a [f64])> {
    params.into_iter().map(|p| (p.name.as_str(), p.value.as_slice())).collect()
}

fn pose_from(config: &PgdsConfig, frozen: bool, tensors: &mut BTreeMap<String, Vec<f64>>) -> Result<PoseEncoder> {
    let mut pose = PoseEncoder::new(&config.pose, config.model.embedding_dim, 0);
    fill(pose.params_mut(), tensors)?;
    pose.set_frozen(frozen);
    Ok(pose)
}

pub fn save_pose_encoder(path: &Path, config: &PgdsConfig, pose: &PoseEncoder) -> Result<()> {
    let tensors = named(pose.params());
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        kind: ArchiveKind::PoseEncoder,
        config: config.clone(),
        pose_frozen: pose.is_frozen(),
        progress: None,
        tensors: tensors.iter().map(|(n, v)| (n.to_string(), v.len())).collect(),
    };
    write_archive(path, &header, &tensors)
}

/// Loads the pose encoder from either a pose archive or a training checkpoint.
pub fn load_pose_encoder(path: &Path) -> Result<(PoseEncoder, PgdsConfig)> {
    let (header, mut tensors) = read_archive(path)?;
    let pose = pose_from(&header.config, header.pose_frozen, &mut tensors)?;
    Ok((pose, header.config))
}

pub fn save_checkpoint(path: &Path, model: &PgdsModel, state: &TrainState) -> Result<()> {
    let mut tensors = named(model.human.params());
    tensors.extend(named(model.human.buffers()));
    for p in &model.projectors {
        tensors.extend(named(p.params()));
        tensors.extend(named(p.buffers()));
    }
    tensors.extend(named(model.pose.params()));
    let moment_names: Vec<(String, String)> = (0..state.optimizer.first_moment.len())
        .map(|i| (format!("adamw.m.{i}"), format!("adamw.v.{i}")))
        .collect();
    for (i, (m, v)) in moment_names.iter().enumerate() {
        tensors.push((m, &state.optimizer.first_moment[i]));
        tensors.push((v, &state.optimizer.second_moment[i]));
    }
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        kind: ArchiveKind::Training,
        config: model.config.clone(),
        pose_frozen: model.pose.is_frozen(),
        progress: Some(Progress {
            epoch: state.epoch,
            step: state.step,
            lr: state.lr,
            optimizer_steps: state.optimizer.step_count,
        }),
        tensors: tensors.iter().map(|(n, v)| (n.to_string(), v.len())).collect(),
    };
    write_archive(path, &header, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<(PgdsModel, TrainState)> {
    let (header, mut tensors) = read_archive(path)?;
    let progress = match (header.kind, header.progress) {
        (ArchiveKind::Training, Some(p)) => p,
        _ => return Err(PgdsError::Checkpoint(format!("{} is not a training checkpoint", path.display()))),
    };
    let pose = pose_from(&header.config, header.pose_frozen, &mut tensors)?;
    let mut model = PgdsModel::new(header.config, pose)?;
    fill(model.human.params_mut(), &mut tensors)?;
    fill(model.human.buffers_mut(), &mut tensors)?;
    for p in &mut model.projectors {
        fill(p.params_mut(), &mut tensors)?;
        fill(p.buffers_mut(), &mut tensors)?;
    }
    let sizes: Vec<usize> = model.trainable_params().iter().map(|p| p.len()).collect();
    let mut optimizer = AdamW::new(model.config.train.weight_decay, &sizes);
    optimizer.step_count = progress.optimizer_steps;
    for i in 0..sizes.len() {
        for (key, slot) in [
            (format!("adamw.m.{i}"), &mut optimizer.first_moment[i]),
            (format!("adamw.v.{i}"), &mut optimizer.second_moment[i]),
        ] {
            let v = tensors
                .remove(&key)
                .ok_or_else(|| PgdsError::Checkpoint(format!("missing tensor {key}")))?;
            if v.len() != slot.len() {
                return Err(PgdsError::Checkpoint(format!("optimizer tensor {key} has the wrong size")));
            }
            *slot = v;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(PgdsError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((
        model,
        TrainState {
            epoch: progress.epoch,
            step: progress.step,
            lr: progress.lr,
            optimizer,
        },
    ))
}

/// Human encoder and config from a training checkpoint; all that inference needs.
pub fn load_human_encoder(path: &Path) -> Result<(HumanEncoder, PgdsConfig)> {
    let (model, _) = load_checkpoint(path)?;
    Ok((model.human, model.config))
}

/// SHA-256 over the pose-encoder parameter values and frozen flag.
pub fn pose_parameter_hash(pose: &PoseEncoder) -> String {
    let mut h = Sha256::new();
    for p in pose.params() {
        h.update(p.name.as_bytes());
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    }
    h.update([u8::from(pose.is_frozen())]);
    hex::encode(h.finalize())
}
