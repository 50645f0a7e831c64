//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails. The training grid (criteria 6 to 8) is shared with
//! criteria 4 and 10.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use pgds::ablation::{cell_dir, run_ablation, AblationParam, AblationSpec, AblationTable, CC_METRICS_FILE, STANDARD_METRICS_FILE};
use pgds::datagen::{generate_dataset, Dataset, GeneratorSpec, PersonRecord, Split};
use pgds::encoders::{pretrain_pose_encoder, PoseEncoder};
use pgds::eval::{evaluate, extract_embeddings, saliency_map, EvalMode, GalleryIndex, MetricsReport};
use pgds::losses::{guide_loss_batch, guide_pair_loss, triplet_batch_hard, BatchLabels};
use pgds::nn::{ExecTrace, Matrix};
use pgds::trainer::{load_checkpoint, load_human_encoder, pose_parameter_hash, resume, train, PgdsModel, TrainOptions, CHECKPOINT_FILE, LOG_FILE};
use pgds::{kl_divergence, softmax_with_temperature, EmbeddingVector, ImageTensor, PgdsConfig, ProbVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAMBDAS: [f64; 4] = [0.0, 0.4, 0.8, 1.0];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(n: usize, o: &Outcome) {
    println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Hinge maximised over every (positive, negative) pair of each anchor.
fn triplet_oracle(emb: &[Vec<f64>], labels: &[u32], margin: f64) -> Option<f64> {
    let n = emb.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut best: Option<f64> = None;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                let h = (sq(&emb[a], &emb[p]) - sq(&emb[a], &emb[q]) + margin).max(0.0);
                best = Some(best.map_or(h, |b: f64| b.max(h)));
            }
        }
        total += best?;
    }
    Some(total / n as f64)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn guide_oracle(pose: &[Vec<f64>], layers: &[Vec<Vec<f64>>], labels: &[u32], m: f64) -> f64 {
    let mut sum = 0.0;
    for feat in layers {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for j in 0..pose.len() {
            for k in 0..pose.len() {
                let (a, b) = (kl(&pose[j], &feat[k]), kl(&feat[k], &pose[j]));
                if labels[j] == labels[k] {
                    pos.push(a + b);
                } else {
                    neg.push((m - a).max(0.0) + (m - b).max(0.0));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        sum += mean(&pos) + mean(&neg);
    }
    sum / layers.len() as f64
}

fn random_probs(r: &mut ChaCha8Rng, dim: usize) -> ProbVector {
    let logits = EmbeddingVector::new((0..dim).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
    softmax_with_temperature(&logits, 2.0).unwrap()
}

/// 4 to 12 shuffled labels over 2 to 6 identities, each appearing at least twice.
fn random_batch_labels(r: &mut ChaCha8Rng) -> Vec<u32> {
    let n = r.random_range(4..=12);
    let ids = r.random_range(2..=n / 2) as u32;
    let mut labels: Vec<u32> = (0..ids).flat_map(|i| [i, i]).collect();
    while labels.len() < n {
        labels.push(r.random_range(0..ids));
    }
    labels.shuffle(r);
    labels
}

fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (mut trip_err, mut guide_err) = (0.0f64, 0.0f64);
    let mut mismatched = 0;
    for _ in 0..1000 {
        let labels = random_batch_labels(&mut r);
        let n = labels.len();
        let dim = r.random_range(1..=6);
        let emb: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let m = Matrix::from_rows(&emb);
        let got = BatchLabels::new(labels.clone()).and_then(|l| triplet_batch_hard(&m, &l, 0.2));
        match (got, triplet_oracle(&emb, &labels, 0.2)) {
            (Ok(a), Some(b)) => trip_err = trip_err.max((a - b).abs()),
            _ => mismatched += 1,
        }

        let pdim = r.random_range(2..=8);
        let pose: Vec<ProbVector> = (0..n).map(|_| random_probs(&mut r, pdim)).collect();
        let layers: Vec<Vec<ProbVector>> = (0..r.random_range(1..=4))
            .map(|_| (0..n).map(|_| random_probs(&mut r, pdim)).collect())
            .collect();
        let plain = |v: &[ProbVector]| v.iter().map(|p| p.probs().to_vec()).collect::<Vec<_>>();
        let oracle_layers: Vec<Vec<Vec<f64>>> = layers.iter().map(|l| plain(l)).collect();
        match BatchLabels::new(labels.clone()).and_then(|l| guide_loss_batch(&pose, &layers, &l, 2.0)) {
            Ok((total, _)) => {
                guide_err = guide_err.max((total - guide_oracle(&plain(&pose), &oracle_layers, &labels, 2.0)).abs())
            }
            Err(_) => mismatched += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        trip_err <= 1e-9 && guide_err <= 1e-9 && mismatched == 0 && secs < 30.0,
        format!("triplet max err {trip_err:.2e}, guide max err {guide_err:.2e}, rejected batches {mismatched}, {secs:.1}s (tol 1e-9, <30s)"),
    )
}

fn analytic_values() -> Outcome {
    let p = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
    let g = guide_pair_loss(&p, &p, false, 2.0).unwrap();
    let same = Matrix::from_rows(&vec![vec![0.3, -0.1, 0.7]; 4]);
    let t = triplet_batch_hard(&same, &BatchLabels::new(vec![0, 0, 1, 1]).unwrap(), 0.2).unwrap();
    let k = kl_divergence(
        &ProbVector::new(vec![0.5, 0.5]).unwrap(),
        &ProbVector::new(vec![0.25, 0.75]).unwrap(),
    )
    .unwrap();
    let pass = (g - 4.0).abs() <= 1e-12 && (t - 0.2).abs() <= 1e-12 && (k - 0.14384).abs() <= 1e-5;
    outcome(pass, format!("guide(p,p,y=0,m=2) = {g}, identical-batch triplet = {t}, KL = {k:.6} (target 0.14384 +- 1e-5)"))
}

/// Central differences of the combined loss against the analytic gradient
/// of every trainable parameter of a micro model.
fn gradient_check(ds: &Dataset) -> Outcome {
    let start = Instant::now();
    let mut cfg = PgdsConfig::default();
    cfg.model.channels = vec![2, 3, 4, 5, 6];
    cfg.model.embedding_dim = 8;
    let pose = pretrain_pose_encoder(ds, &cfg.pose, 8, 0, 5).unwrap().0;
    let mut model = PgdsModel::new(cfg, pose).unwrap();

    let train = ds.indices(Split::Train);
    let first = ds.records[train[0]].identity_id;
    let a: Vec<usize> = train.iter().copied().filter(|&i| ds.records[i].identity_id == first).take(2).collect();
    let b: Vec<usize> = train.iter().copied().filter(|&i| ds.records[i].identity_id != first).take(2).collect();
    let idx: Vec<usize> = a.into_iter().chain(b).collect();
    let refs: Vec<&ImageTensor> = idx.iter().map(|&i| &ds.images[i]).collect();
    let x = ImageTensor::batch(&refs).unwrap();
    let labels = BatchLabels::new(idx.iter().map(|&i| ds.records[i].identity_id).collect()).unwrap();

    model.zero_grad();
    let rec = model.forward(&x, &labels).unwrap();
    model.backward(&rec);
    let analytic: Vec<Vec<f64>> = model.trainable_params().iter().map(|p| p.grad.clone()).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &an) in grads.iter().enumerate() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.trainable_params_mut()[pi].value[k] += delta;
                m.forward(&x, &labels).unwrap().breakdown.combined
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(1e-5));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 120.0,
        format!("max relative error {worst:.2e} over {checked} parameters, {secs:.1}s (tol 1e-4, <120s)"),
    )
}

fn record(identity: u32, camera: u32, clothes: u32) -> PersonRecord {
    PersonRecord {
        identity_id: identity,
        camera_id: camera,
        clothes_id: clothes,
        pose_seed: 0,
        split: Split::Gallery,
        image_path: String::new(),
    }
}

/// Per-query AP and first-hit rank from counting, with ties going to the
/// lower gallery row. `None` for queries without a relevant candidate.
fn metric_oracle(q: &GalleryIndex, g: &GalleryIndex, mode: EvalMode) -> Vec<Option<(f64, usize)>> {
    (0..q.len())
        .map(|i| {
            let qr = &q.records[i];
            let kept: Vec<usize> = (0..g.len())
                .filter(|&j| {
                    let gr = &g.records[j];
                    let same = gr.identity_id == qr.identity_id;
                    !(same && gr.camera_id == qr.camera_id)
                        && !(same && mode == EvalMode::Cc && gr.clothes_id == qr.clothes_id)
                })
                .collect();
            let d = |j: usize| sq(q.embeddings.row(i), g.embeddings.row(j));
            let rank = |j: usize| 1 + kept.iter().filter(|&&o| d(o) < d(j) || (d(o) == d(j) && o < j)).count();
            let mut ranks: Vec<usize> = kept
                .iter()
                .copied()
                .filter(|&j| g.records[j].identity_id == qr.identity_id)
                .map(rank)
                .collect();
            if ranks.is_empty() {
                return None;
            }
            ranks.sort();
            let ap = ranks.iter().enumerate().map(|(n, &r)| (n + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64;
            Some((ap, ranks[0]))
        })
        .collect()
}

fn cmc_is_valid(m: &MetricsReport) -> bool {
    m.cmc.windows(2).all(|w| w[0] <= w[1])
        && m.cmc.iter().all(|v| (0.0..=1.0).contains(v))
        && (0.0..=1.0).contains(&m.map)
}

/// Integer-valued embeddings so distance ties are common.
fn random_index(r: &mut ChaCha8Rng, rows: usize) -> GalleryIndex {
    let records: Vec<PersonRecord> = (0..rows)
        .map(|_| record(r.random_range(0..3), r.random_range(0..2), r.random_range(0..2)))
        .collect();
    let emb: Vec<Vec<f64>> = (0..rows).map(|_| (0..2).map(|_| r.random_range(0..3) as f64).collect()).collect();
    GalleryIndex {
        embeddings: Matrix::from_rows(&emb),
        records,
    }
}

fn metric_check() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(23);
    let mut err = 0.0f64;
    let mut mismatched = 0;
    let mut bad_cmc = 0;
    for t in 0..500 {
        let mode = if t % 2 == 0 { EvalMode::Standard } else { EvalMode::Cc };
        let (nq, ng) = (r.random_range(1..=4), r.random_range(1..=10));
        let q = random_index(&mut r, nq);
        let g = random_index(&mut r, ng);
        let oracle = metric_oracle(&q, &g, mode);
        let scored: Vec<(f64, usize)> = oracle.iter().flatten().copied().collect();
        match evaluate(&q, &g, mode) {
            Ok(m) => {
                if scored.is_empty() {
                    mismatched += 1;
                    continue;
                }
                let n = scored.len() as f64;
                let map = scored.iter().map(|s| s.0).sum::<f64>() / n;
                let r1 = scored.iter().filter(|s| s.1 == 1).count() as f64 / n;
                err = err.max((map - m.map).abs()).max((r1 - m.rank1).abs());
                for (k, c) in m.cmc.iter().enumerate() {
                    let want = scored.iter().filter(|s| s.1 <= k + 1).count() as f64 / n;
                    err = err.max((want - c).abs());
                }
                if m.cmc.len() != g.len() || m.excluded_queries != oracle.len() - scored.len() {
                    mismatched += 1;
                }
                bad_cmc += usize::from(!cmc_is_valid(&m));
            }
            Err(_) => mismatched += usize::from(!scored.is_empty()),
        }
    }
    outcome(
        err <= 1e-9 && mismatched == 0 && bad_cmc == 0,
        format!("max |mAP/R1/CMC - oracle| {err:.2e}, mismatches {mismatched}, invalid CMC {bad_cmc} over 500 instances (tol 1e-9)"),
    )
}

fn embed(human: &pgds::encoders::HumanEncoder, ds: &Dataset, trace: Option<&mut ExecTrace>) -> Matrix {
    let idx: Vec<usize> = (0..ds.records.len()).filter(|&i| ds.records[i].split != Split::Train).collect();
    let refs: Vec<&ImageTensor> = idx.iter().map(|&i| &ds.images[i]).collect();
    extract_embeddings(human, &refs, ds.records_at(&idx), trace).unwrap().embeddings
}

fn inference_contracts(ds: &Dataset, pose: &PoseEncoder, grid: &Path, depth_dir: &Path) -> Outcome {
    let hash = pose_parameter_hash(pose);
    let mut hash_ok = 0;
    let mut runs = 0;
    for &l in &LAMBDAS {
        for &s in &SEEDS {
            let (model, _) = load_checkpoint(&cell_dir(grid, AblationParam::Lambda, l, s).join(CHECKPOINT_FILE)).unwrap();
            hash_ok += usize::from(pose_parameter_hash(&model.pose) == hash);
            runs += 1;
        }
    }

    let ckpt3 = cell_dir(grid, AblationParam::Lambda, 0.8, 0).join(CHECKPOINT_FILE);
    let ckpt1 = cell_dir(depth_dir, AblationParam::PhpDepth, 1.0, 0).join(CHECKPOINT_FILE);
    let (attached, _) = load_checkpoint(&ckpt3).unwrap();
    let (detached, _) = load_human_encoder(&ckpt3).unwrap();
    let mut trace3 = ExecTrace::new();
    let e_att = embed(&attached.human, ds, Some(&mut trace3));
    let e_det = embed(&detached, ds, None);
    let bitwise = e_att.data.iter().zip(&e_det.data).all(|(a, b)| a.to_bits() == b.to_bits());
    let foreign = trace3.count_with_prefix("pose.") + trace3.count_with_prefix("php.");

    let mut trace1 = ExecTrace::new();
    let (depth1, _) = load_human_encoder(&ckpt1).unwrap();
    embed(&depth1, ds, Some(&mut trace1));

    // Positive control: the same trace type does see pose and projector nodes.
    let mut control = ExecTrace::new();
    let x = ImageTensor::batch(&[&ds.images[0]]).unwrap();
    attached.pose.pose_forward(&x, Some(&mut control)).unwrap();
    let pass = attached.human.forward(&x, pgds::encoders::Mode::Eval, false, None).unwrap();
    let proj = &attached.projectors[0];
    proj.forward(&pass.stages[proj.stage()], pgds::encoders::Mode::Eval, Some(&mut control)).unwrap();
    let control_ok = control.count_with_prefix("pose.") > 0 && control.count_with_prefix("php.") > 0;

    let flops_equal = trace3.total_flops() == trace1.total_flops() && trace3.total_flops() > 0;
    outcome(
        hash_ok == runs && bitwise && foreign == 0 && control_ok && flops_equal,
        format!(
            "pose hash unchanged in {hash_ok}/{runs} runs, attached/detached embeddings bitwise equal: {bitwise}, \
             pose/projector nodes at inference: {foreign} (control sees them: {control_ok}), \
             inference FLOPs depth 3 {} vs depth 1 {}",
            trace3.total_flops(),
            trace1.total_flops()
        ),
    )
}

fn cc_by_seed(table: &AblationTable, value: f64) -> Vec<f64> {
    let mut cells: Vec<_> = table.cells.iter().filter(|c| c.value == value).collect();
    cells.sort_by_key(|c| c.seed);
    cells.iter().map(|c| c.cc.map_or(f64::NAN, |m| m.map)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn all_reports_valid(dirs: &[std::path::PathBuf]) -> (usize, usize) {
    let mut ok = 0;
    let mut total = 0;
    for d in dirs {
        for f in [STANDARD_METRICS_FILE, CC_METRICS_FILE] {
            let Ok(text) = std::fs::read_to_string(d.join(f)) else { continue };
            let m: MetricsReport = serde_json::from_str(&text).unwrap();
            total += 1;
            ok += usize::from(cmc_is_valid(&m));
        }
    }
    (ok, total)
}

fn reproducibility(ds: &Dataset, pose: &PoseEncoder, root: &Path) -> Outcome {
    let mut cfg = PgdsConfig::default();
    cfg.seed = 7;
    cfg.train.epochs = 3;
    let opts = TrainOptions::default();
    let (a, b, c) = (root.join("a"), root.join("b"), root.join("c"));
    train(&cfg, ds, pose.clone(), &a, &opts).unwrap();
    train(&cfg, ds, pose.clone(), &b, &opts).unwrap();
    let partial = TrainOptions {
        stop_after_epoch: Some(1),
        ..TrainOptions::default()
    };
    train(&cfg, ds, pose.clone(), &c, &partial).unwrap();
    resume(&c.join(CHECKPOINT_FILE), ds, &c, &opts).unwrap();
    let same = |x: &Path, y: &Path, f: &str| std::fs::read(x.join(f)).unwrap() == std::fs::read(y.join(f)).unwrap();
    let twice = same(&a, &b, LOG_FILE) && same(&a, &b, CHECKPOINT_FILE);
    let resumed = same(&a, &c, LOG_FILE) && same(&a, &c, CHECKPOINT_FILE);
    outcome(
        twice && resumed,
        format!("same-seed runs byte-identical: {twice}, resume after epoch 1 byte-identical: {resumed}"),
    )
}

fn saliency_check(ds: &Dataset, checkpoint: &Path) -> Outcome {
    let (human, _) = load_human_encoder(checkpoint).unwrap();
    let held_out: Vec<usize> = (0..ds.records.len()).filter(|&i| ds.records[i].split != Split::Train).collect();
    let step = held_out.len() / 20;
    let mut wins = 0;
    for k in 0..20 {
        let i = held_out[k * step];
        let sal = saliency_map(&human, &ds.images[i]).unwrap();
        let mask = ds.body_mask(i).unwrap();
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0.0, 0.0, 0.0);
        for (s, &m) in sal.iter().zip(&mask) {
            if m {
                inside += s;
                ni += 1.0;
            } else {
                outside += s;
                no += 1.0;
            }
        }
        wins += usize::from(inside / ni > outside / no);
    }
    outcome(wins >= 16, format!("inside-mask saliency higher on {wins}/20 held-out images (need >= 16)"))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_dataset(&GeneratorSpec::new(16, 2, 3, 6, 0), &data).unwrap();
    let ds = Dataset::load(&data).unwrap();

    let mut results = Vec::new();
    let mut emit = |n: usize, o: Outcome| {
        report(n, &o);
        results.push(o.pass);
    };
    emit(1, loss_oracles());
    emit(2, analytic_values());
    emit(3, gradient_check(&ds));

    let start = Instant::now();
    let cfg = PgdsConfig::default();
    let (pose, _) = pretrain_pose_encoder(&ds, &cfg.pose, cfg.model.embedding_dim, cfg.pose.epochs, 0).unwrap();
    let grid = tmp.path().join("lambda");
    let lambda_spec = AblationSpec {
        param: AblationParam::Lambda,
        values: LAMBDAS.to_vec(),
        seeds: SEEDS.to_vec(),
        base: cfg.clone(),
    };
    let lambda_table = run_ablation(&lambda_spec, &ds, &pose, &grid, 1).unwrap();
    let depth_dir = tmp.path().join("depth");
    let depth_spec = AblationSpec {
        param: AblationParam::PhpDepth,
        values: vec![1.0],
        seeds: SEEDS.to_vec(),
        base: cfg.clone(),
    };
    let depth_table = run_ablation(&depth_spec, &ds, &pose, &depth_dir, 1).unwrap();
    println!("{}", lambda_table.to_text());
    println!("{}", depth_table.to_text());
    println!("grid of {} runs took {:.0}s", LAMBDAS.len() * SEEDS.len() + SEEDS.len(), start.elapsed().as_secs_f64());

    emit(4, inference_contracts(&ds, &pose, &grid, &depth_dir));

    let run_dirs: Vec<_> = lambda_table.cells.iter().chain(&depth_table.cells).map(|c| c.run_dir.clone()).collect();
    let base = metric_check();
    let (valid, total) = all_reports_valid(&run_dirs);
    let grid_ok = valid == total && total == 2 * run_dirs.len();
    emit(
        5,
        outcome(base.pass && grid_ok, format!("{}; CMC valid on {valid}/{total} grid reports", base.detail)),
    );

    let baseline = cc_by_seed(&lambda_table, 0.0);
    let guided = cc_by_seed(&lambda_table, 0.8);
    let wins = guided.iter().zip(&baseline).filter(|(g, b)| g > b).count();
    emit(
        6,
        outcome(
            wins >= 4,
            format!("lambda 0.8 beats lambda 0 on cc mAP in {wins}/5 seeds: {guided:.4?} vs {baseline:.4?}"),
        ),
    );

    let depth1 = mean(&cc_by_seed(&depth_table, 1.0));
    let depth3 = mean(&guided);
    emit(
        7,
        outcome(depth3 >= depth1, format!("mean cc mAP depth 3 {depth3:.4} vs depth 1 {depth1:.4}")),
    );

    let means: Vec<f64> = LAMBDAS.iter().map(|&l| mean(&cc_by_seed(&lambda_table, l))).collect();
    let best = (0..means.len()).fold(0, |b, i| if means[i] > means[b] { i } else { b });
    emit(
        8,
        outcome(
            LAMBDAS[best] != 0.0,
            format!("mean cc mAP over lambda {LAMBDAS:?}: {means:.4?}, best at lambda {}", LAMBDAS[best]),
        ),
    );

    emit(9, reproducibility(&ds, &pose, &tmp.path().join("repro")));
    emit(
        10,
        saliency_check(&ds, &cell_dir(&grid, AblationParam::Lambda, 0.8, 0).join(CHECKPOINT_FILE)),
    );

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
