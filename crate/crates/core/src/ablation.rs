//! Parameter sweeps over the guide weight and the number of supervised
//! stages. Each (value, seed) cell trains and evaluates one model in its own
//! directory; a failing cell marks its row as failed and the sweep goes on.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PgdsConfig;
use crate::datagen::Dataset;
use crate::encoders::PoseEncoder;
use crate::error::{PgdsError, Result};
use crate::eval::{evaluate_dataset, EvalMode, MetricsReport};
use crate::trainer::{load_human_encoder, train, PgdsModel, TrainOptions};

/// Names of the metric files every sweep cell leaves in its run directory.
pub const STANDARD_METRICS_FILE: &str = "metrics_standard.json";
pub const CC_METRICS_FILE: &str = "metrics_cc.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationParam {
    Lambda,
    PhpDepth,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Lambda => "lambda",
            AblationParam::PhpDepth => "php_depth",
        }
    }
}

impl std::str::FromStr for AblationParam {
    type Err = PgdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(AblationParam::Lambda),
            "php_depth" | "depth" => Ok(AblationParam::PhpDepth),
            other => Err(PgdsError::Parse(format!("unknown ablation parameter '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub param: AblationParam,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: PgdsConfig,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(PgdsError::domain("ablation needs at least one value and one seed"));
        }
        if self.param == AblationParam::PhpDepth {
            for &v in &self.values {
                if ![1.0, 2.0, 3.0].contains(&v) {
                    return Err(PgdsError::domain(format!("php_depth must be 1, 2 or 3, got {v}")));
                }
                if v as usize > self.base.loss.php_stages.len() {
                    return Err(PgdsError::domain(format!(
                        "php_depth {v} exceeds the {} configured php_stages",
                        self.base.loss.php_stages.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Configuration of one sweep cell.
    pub fn cell_config(&self, value: f64, seed: u64) -> PgdsConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        match self.param {
            AblationParam::Lambda => cfg.loss.lambda = value,
            AblationParam::PhpDepth => cfg.loss.php_stages.truncate(value as usize),
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub value: f64,
    pub seed: u64,
    pub run_dir: PathBuf,
    /// `None` when the cell failed; the error text is in `error`.
    pub standard: Option<CellMetrics>,
    pub cc: Option<CellMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub map: f64,
    pub rank1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub failed: bool,
    pub completed_runs: usize,
    pub standard_map: Option<MeanStd>,
    pub standard_rank1: Option<MeanStd>,
    pub cc_map: Option<MeanStd>,
    pub cc_rank1: Option<MeanStd>,
    /// Trainable parameters of the cell's model; filled for depth sweeps.
    pub trainable_params: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub param: AblationParam,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<CellResult>,
}

impl AblationTable {
    /// Per-seed cc-mode mAP of the row for `value`, in seed order. Failed
    /// cells are skipped.
    pub fn cc_maps(&self, value: f64) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.value == value)
            .filter_map(|c| c.cc.map(|m| m.map))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| PgdsError::Parse(e.to_string()))
    }

    /// Fixed-width text rendering of the rows.
    pub fn to_text(&self) -> String {
        let fmt = |m: Option<MeanStd>| m.map_or_else(|| "-".to_string(), |m| format!("{:.4}±{:.4}", m.mean, m.std));
        let mut s = String::new();
        let params = self.param == AblationParam::PhpDepth;
        let _ = write!(
            s,
            "{:<10} {:>4} {:>15} {:>15} {:>15} {:>15}",
            self.param.name(),
            "runs",
            "std mAP",
            "std R1",
            "cc mAP",
            "cc R1"
        );
        if params {
            let _ = write!(s, " {:>10}", "params");
        }
        s.push('\n');
        for r in &self.rows {
            let runs = if r.failed {
                format!("{}!", r.completed_runs)
            } else {
                r.completed_runs.to_string()
            };
            let _ = write!(
                s,
                "{:<10} {:>4} {:>15} {:>15} {:>15} {:>15}",
                r.value,
                runs,
                fmt(r.standard_map),
                fmt(r.standard_rank1),
                fmt(r.cc_map),
                fmt(r.cc_rank1)
            );
            if params {
                let _ = write!(s, " {:>10}", r.trainable_params.map_or("-".to_string(), |p| p.to_string()));
            }
            s.push('\n');
        }
        s
    }
}

fn run_cell(
    spec: &AblationSpec,
    value: f64,
    seed: u64,
    dataset: &Dataset,
    pose: &PoseEncoder,
    dir: &Path,
) -> Result<(MetricsReport, MetricsReport)> {
    let cfg = spec.cell_config(value, seed);
    cfg.validate()?;
    let outcome = train(&cfg, dataset, pose.clone(), dir, &TrainOptions::default())?;
    let (human, _) = load_human_encoder(&outcome.checkpoint)?;
    let standard = evaluate_dataset(&human, dataset, EvalMode::Standard)?;
    let cc = evaluate_dataset(&human, dataset, EvalMode::Cc)?;
    standard.write_json(&dir.join(STANDARD_METRICS_FILE))?;
    cc.write_json(&dir.join(CC_METRICS_FILE))?;
    Ok((standard, cc))
}

/// Directory of one sweep cell below `out_dir`.
pub fn cell_dir(out_dir: &Path, param: AblationParam, value: f64, seed: u64) -> PathBuf {
    out_dir.join(format!("{}_{value}", param.name())).join(format!("seed_{seed}"))
}

/// Trains and evaluates every (value, seed) cell. `parallel` > 1 runs that
/// many cells at once; results are reported in (value, seed) order either way.
pub fn run_ablation(
    spec: &AblationSpec,
    dataset: &Dataset,
    pose: &PoseEncoder,
    out_dir: &Path,
    parallel: usize,
) -> Result<AblationTable> {
    spec.validate()?;
    let cells: Vec<(f64, u64)> = spec
        .values
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |&(value, seed): &(f64, u64)| -> CellResult {
        let dir = cell_dir(out_dir, spec.param, value, seed);
        match run_cell(spec, value, seed, dataset, pose, &dir) {
            Ok((standard, cc)) => CellResult {
                value,
                seed,
                run_dir: dir,
                standard: Some(CellMetrics {
                    map: standard.map,
                    rank1: standard.rank1,
                }),
                cc: Some(CellMetrics {
                    map: cc.map,
                    rank1: cc.rank1,
                }),
                error: None,
            },
            Err(e) => {
                warn!("ablation cell {}={value} seed {seed} failed: {e}", spec.param.name());
                CellResult {
                    value,
                    seed,
                    run_dir: dir,
                    standard: None,
                    cc: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let results: Vec<CellResult> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| PgdsError::State(format!("cannot start worker pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect())
    } else {
        cells.iter().map(run).collect()
    };

    let mut rows = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let mine: Vec<&CellResult> = results.iter().filter(|c| c.value == value).collect();
        let ok: Vec<&CellResult> = mine.iter().copied().filter(|c| c.error.is_none()).collect();
        let stat = |f: &dyn Fn(&CellResult) -> f64| {
            (!ok.is_empty()).then(|| MeanStd::of(&ok.iter().map(|c| f(c)).collect::<Vec<_>>()))
        };
        let trainable_params = match spec.param {
            AblationParam::PhpDepth => PgdsModel::new(spec.cell_config(value, spec.seeds[0]), pose.clone())
                .and_then(|m| m.assert_partition())
                .map(|(t, _)| t)
                .ok(),
            AblationParam::Lambda => None,
        };
        rows.push(AblationRow {
            value,
            failed: ok.len() < mine.len(),
            completed_runs: ok.len(),
            standard_map: stat(&|c| c.standard.map_or(f64::NAN, |m| m.map)),
            standard_rank1: stat(&|c| c.standard.map_or(f64::NAN, |m| m.rank1)),
            cc_map: stat(&|c| c.cc.map_or(f64::NAN, |m| m.map)),
            cc_rank1: stat(&|c| c.cc.map_or(f64::NAN, |m| m.rank1)),
            trainable_params,
        });
    }
    Ok(AblationTable {
        param: spec.param,
        seeds: spec.seeds.clone(),
        rows,
        cells: results,
    })
}
