use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use pgds::ablation::{run_ablation, AblationParam, AblationSpec};
use pgds::datagen::{generate_dataset, Dataset, DomainStyle, GeneratorSpec, Split};
use pgds::encoders::pretrain_pose_encoder;
use pgds::eval::{
    cross_domain_evaluate, evaluate_dataset, extract_split, query_topk, saliency_heatmap, EvalMode,
};
use pgds::report::report;
use pgds::trainer::{
    load_human_encoder, load_pose_encoder, resume, save_pose_encoder, train, TrainOptions,
};
use pgds::{ImageTensor, PgdsConfig, PgdsError, Result};

const POSE_FILE: &str = "pose_encoder.pgds";

#[derive(Parser, Debug)]
#[command(name = "pgds", version, about = "Pose-guided clothes-changing person re-identification")]
struct Cli {
    /// TOML configuration file; command-line flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location: a directory for most commands, the PNG path for `heatmap`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded execution throughout; with a fixed seed every output is byte-stable.
    #[arg(long, global = true)]
    strict_deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic clothes-changing dataset.
    GenData {
        #[arg(long, default_value_t = 16)]
        identities: usize,
        #[arg(long, default_value_t = 2)]
        cameras: usize,
        #[arg(long, default_value_t = 3)]
        clothes: usize,
        #[arg(long, default_value_t = 6)]
        images: usize,
        /// Identities held out for query/gallery (default: half).
        #[arg(long)]
        test_identities: Option<usize>,
        /// Rendering style: a or b.
        #[arg(long, default_value = "a")]
        domain: DomainStyle,
    },
    /// Pretrain and freeze the pose encoder on a dataset's keypoint heatmaps.
    PretrainPose {
        #[arg(long, env = "PGDS_DATA_DIR")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the human encoder and projectors against a frozen pose encoder.
    Train {
        #[arg(long, env = "PGDS_DATA_DIR")]
        data: PathBuf,
        /// Pose encoder archive written by `pretrain-pose`.
        #[arg(long, required_unless_present = "resume")]
        pose: Option<PathBuf>,
        /// Continue from a training checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Keep a checkpoint per epoch next to the rolling one.
        #[arg(long)]
        keep_epochs: bool,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "PGDS_DATA_DIR")]
        data: PathBuf,
        /// standard, cc or cross.
        #[arg(long, default_value = "standard")]
        mode: EvalMode,
        /// JSON report path; the CMC curve is written next to it as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rank a dataset's gallery against one image.
    Query {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Dataset root whose gallery split is searched.
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 10)]
        topk: usize,
    },
    /// Write a saliency overlay for one image.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Sweep lambda or the number of supervised stages over several seeds.
    Ablate {
        #[arg(long, env = "PGDS_DATA_DIR")]
        data: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        /// lambda or php_depth.
        #[arg(long)]
        param: AblationParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Number of cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Summarise finished runs as markdown with plots.
    Report {
        /// Run directories containing a training log and metrics reports.
        runs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PgdsConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PgdsConfig::load(p)?,
        None => PgdsConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| PgdsError::io(p, e))
}

fn run(cli: &Cli) -> Result<()> {
    if cli.strict_deterministic {
        // Ignore the error if a pool already exists; it only happens in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match &cli.command {
        Command::GenData {
            identities,
            cameras,
            clothes,
            images,
            test_identities,
            domain,
        } => {
            let cfg = load_config(cli)?;
            let root = match &cli.out {
                Some(p) => p.clone(),
                None => std::env::var_os("PGDS_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from),
            };
            let mut spec = GeneratorSpec::new(*identities, *cameras, *clothes, *images, cfg.seed);
            spec.test_identities = *test_identities;
            spec.style = *domain;
            spec.height = cfg.model.image_height;
            spec.width = cfg.model.image_width;
            let summary = generate_dataset(&spec, &root)?;
            println!("wrote {} images to {}", summary.records.len(), root.display());
        }
        Command::PretrainPose { data, epochs } => {
            let mut cfg = load_config(cli)?;
            if let Some(e) = epochs {
                cfg.pose.epochs = *e;
            }
            cfg.validate()?;
            let ds = Dataset::load(data)?;
            let out = out_dir(cli, "runs/pose");
            create_dir(&out)?;
            let (pose, rep) = pretrain_pose_encoder(&ds, &cfg.pose, cfg.model.embedding_dim, cfg.pose.epochs, cfg.seed)?;
            let path = out.join(POSE_FILE);
            save_pose_encoder(&path, &cfg, &pose)?;
            println!(
                "pose encoder: held-out mse {:.6} (untrained {:.6}) -> {}",
                rep.validation_mse,
                rep.untrained_validation_mse,
                path.display()
            );
        }
        Command::Train {
            data,
            pose,
            resume: from,
            lambda,
            epochs,
            keep_epochs,
        } => {
            let ds = Dataset::load(data)?;
            let out = out_dir(cli, "runs/train");
            let opts = TrainOptions {
                keep_epoch_checkpoints: *keep_epochs,
                stop_after_epoch: None,
            };
            let outcome = if let Some(ckpt) = from {
                resume(ckpt, &ds, &out, &opts)?
            } else {
                let mut cfg = load_config(cli)?;
                if let Some(l) = lambda {
                    cfg.loss.lambda = *l;
                }
                if let Some(e) = epochs {
                    cfg.train.epochs = *e;
                }
                cfg.validate()?;
                let pose_path = pose.as_ref().ok_or_else(|| PgdsError::domain("--pose is required"))?;
                let (pose, _) = load_pose_encoder(pose_path)?;
                train(&cfg, &ds, pose, &out, &opts)?
            };
            println!(
                "trained {} steps ({} trainable / {} frozen parameters) -> {}",
                outcome.steps,
                outcome.trainable_params,
                outcome.frozen_params,
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            mode,
            report: report_path,
        } => {
            let (human, _) = load_human_encoder(checkpoint)?;
            let ds = Dataset::load(data)?;
            let rep = match mode {
                EvalMode::CrossDomain => cross_domain_evaluate(&human, &ds)?,
                m => evaluate_dataset(&human, &ds, *m)?,
            };
            let path = report_path
                .clone()
                .unwrap_or_else(|| out_dir(cli, ".").join(format!("metrics_{}.json", mode_name(*mode))));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            rep.write_json(&path)?;
            rep.write_cmc_csv(&path.with_extension("cmc.csv"))?;
            println!(
                "{} mAP {:.4} R1 {:.4} R5 {:.4} R10 {:.4} ({} queries, {} excluded) -> {}",
                mode_name(*mode),
                rep.map,
                rep.rank1,
                rep.rank5,
                rep.rank10,
                rep.scored_queries,
                rep.excluded_queries,
                path.display()
            );
        }
        Command::Query {
            checkpoint,
            image,
            gallery,
            topk,
        } => {
            let (human, _) = load_human_encoder(checkpoint)?;
            let ds = Dataset::load(gallery)?;
            let index = extract_split(&human, &ds, Split::Gallery)?;
            let img = ImageTensor::load_png(image)?;
            for (rank, (row, dist)) in query_topk(&human, &img, &index, *topk)?.into_iter().enumerate() {
                let r = &index.records[row];
                println!(
                    "{}\t{dist:.6}\tid={}\tcam={}\tclothes={}\t{}",
                    rank + 1,
                    r.identity_id,
                    r.camera_id,
                    r.clothes_id,
                    r.image_path
                );
            }
        }
        Command::Heatmap { checkpoint, image } => {
            let (human, _) = load_human_encoder(checkpoint)?;
            let img = ImageTensor::load_png(image)?;
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("saliency.png"));
            saliency_heatmap(&human, &img, &path)?;
            println!("saliency overlay -> {}", path.display());
        }
        Command::Ablate {
            data,
            pose,
            param,
            values,
            seeds,
            parallel,
        } => {
            let base = load_config(cli)?;
            base.validate()?;
            let ds = Dataset::load(data)?;
            let (pose, _) = load_pose_encoder(pose)?;
            let out = out_dir(cli, "runs/ablation");
            create_dir(&out)?;
            let spec = AblationSpec {
                param: *param,
                values: values.clone(),
                seeds: seeds.clone(),
                base,
            };
            let workers = if cli.strict_deterministic { 1 } else { *parallel };
            let table = run_ablation(&spec, &ds, &pose, &out, workers)?;
            let json = out.join("ablation.json");
            std::fs::write(&json, table.to_json()?).map_err(|e| PgdsError::io(&json, e))?;
            let text = table.to_text();
            let txt = out.join("ablation.txt");
            std::fs::write(&txt, &text).map_err(|e| PgdsError::io(&txt, e))?;
            print!("{text}");
        }
        Command::Report { runs } => {
            let out = out_dir(cli, "report");
            let rep = report(runs, &out)?;
            println!(
                "{} runs summarised ({} skipped) -> {}",
                rep.runs.len(),
                rep.skipped.len(),
                rep.markdown.display()
            );
        }
    }
    Ok(())
}

fn mode_name(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Standard => "standard",
        EvalMode::Cc => "cc",
        EvalMode::CrossDomain => "cross",
    }
}

/// Collapses a message onto one line so failures stay machine-parsable.
fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error: kind=usage msg={}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    info!("pgds {}", env!("CARGO_PKG_VERSION"));
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
