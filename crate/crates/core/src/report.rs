//! Markdown summary of finished runs with loss-curve and CMC plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::warn;

use crate::error::{PgdsError, Result};
use crate::eval::MetricsReport;
use crate::trainer::{read_log, StepLog, LOG_FILE};

pub const REPORT_FILE: &str = "report.md";
pub const LOSS_PLOT_FILE: &str = "loss_curves.png";
pub const CMC_PLOT_FILE: &str = "cmc.png";

const PALETTE: [(&str, [u8; 3]); 8] = [
    ("blue", [31, 119, 180]),
    ("orange", [255, 127, 14]),
    ("green", [44, 160, 44]),
    ("red", [214, 39, 40]),
    ("purple", [148, 103, 189]),
    ("brown", [140, 86, 75]),
    ("pink", [227, 119, 194]),
    ("grey", [127, 127, 127]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub log: Vec<StepLog>,
    /// Metrics files found in the run directory, sorted by file name.
    pub metrics: Vec<(String, MetricsReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub markdown: PathBuf,
    pub loss_plot: PathBuf,
    pub cmc_plot: Option<PathBuf>,
    pub runs: Vec<RunSummary>,
    pub skipped: Vec<PathBuf>,
}

fn load_run(dir: &Path) -> Result<RunSummary> {
    let log = read_log(&dir.join(LOG_FILE))?;
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| PgdsError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    let metrics = names
        .into_iter()
        .filter_map(|n| {
            let text = std::fs::read_to_string(dir.join(&n)).ok()?;
            let m: MetricsReport = serde_json::from_str(&text).ok()?;
            Some((n.trim_end_matches(".json").to_string(), m))
        })
        .collect();
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        log,
        metrics,
    })
}

/// Writes `report.md`, `loss_curves.png` and (when any run has metrics)
/// `cmc.png` into `out_dir`. Runs without a training log are skipped with a
/// warning.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    if run_dirs.is_empty() {
        return Err(PgdsError::domain("no runs"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| PgdsError::io(out_dir, e))?;
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for dir in run_dirs {
        match load_run(dir) {
            Ok(r) => runs.push(r),
            Err(e) => {
                warn!("skipping run {}: {e}", dir.display());
                skipped.push(dir.clone());
            }
        }
    }

    let loss_plot = out_dir.join(LOSS_PLOT_FILE);
    let curves: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .map(|r| r.log.iter().map(|l| (l.step as f64, l.combined)).collect())
        .collect();
    line_plot(&curves, &loss_plot)?;

    let cmc_curves: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .flat_map(|r| &r.metrics)
        .map(|(_, m)| m.cmc.iter().enumerate().map(|(k, &v)| ((k + 1) as f64, v)).collect())
        .collect();
    let cmc_plot = if cmc_curves.is_empty() {
        None
    } else {
        let p = out_dir.join(CMC_PLOT_FILE);
        line_plot(&cmc_curves, &p)?;
        Some(p)
    };

    let mut md = String::from("# Run summary\n\n");
    md.push_str("| run | colour | steps | final combined | final triplet | final guide |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for (i, r) in runs.iter().enumerate() {
        let last = r.log.last();
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.dir.display(),
            PALETTE[i % PALETTE.len()].0,
            r.log.len(),
            f(last.map(|l| l.combined)),
            f(last.map(|l| l.triplet)),
            f(last.map(|l| l.guide)),
        );
    }
    md.push_str("\n## Retrieval\n\n");
    md.push_str("| run | report | colour | mode | mAP | R1 | R5 | R10 | scored | excluded |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    let mut curve = 0;
    for r in &runs {
        for (name, m) in &r.metrics {
            let _ = writeln!(
                md,
                "| {} | {name} | {} | {:?} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |",
                r.dir.display(),
                PALETTE[curve % PALETTE.len()].0,
                m.mode,
                m.map,
                m.rank1,
                m.rank5,
                m.rank10,
                m.scored_queries,
                m.excluded_queries
            );
            curve += 1;
        }
    }
    md.push_str("\n## Plots\n\n");
    let _ = writeln!(md, "Combined training loss per step:\n\n![loss]({LOSS_PLOT_FILE})\n");
    if cmc_plot.is_some() {
        let _ = writeln!(md, "CMC curves (rank on x, match rate on y):\n\n![cmc]({CMC_PLOT_FILE})\n");
    }
    if !skipped.is_empty() {
        md.push_str("## Skipped\n\n");
        for s in &skipped {
            let _ = writeln!(md, "- {} (no readable training log)", s.display());
        }
    }
    let markdown = out_dir.join(REPORT_FILE);
    std::fs::write(&markdown, md).map_err(|e| PgdsError::io(&markdown, e))?;
    Ok(ReportOutput {
        markdown,
        loss_plot,
        cmc_plot,
        runs,
        skipped,
    })
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: u32 = 24;

/// Overlaid polylines on a white canvas with plain axes; series colours
/// follow the palette order.
fn line_plot(series: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..PLOT_W - MARGIN {
        img.put_pixel(x, PLOT_H - MARGIN, axis);
    }
    for y in MARGIN..=PLOT_H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    let pts = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 <= x1 {
        let sx = if x1 > x0 { x1 - x0 } else { 1.0 };
        let sy = if y1 > y0 { y1 - y0 } else { 1.0 };
        let span_w = (PLOT_W - 2 * MARGIN - 1) as f64;
        let span_h = (PLOT_H - 2 * MARGIN - 1) as f64;
        let to_px = |(x, y): (f64, f64)| {
            (
                MARGIN as f64 + 1.0 + (x - x0) / sx * span_w,
                (PLOT_H - MARGIN) as f64 - 1.0 - (y - y0) / sy * span_h,
            )
        };
        for (i, s) in series.iter().enumerate() {
            let colour = Rgb(PALETTE[i % PALETTE.len()].1);
            let finite: Vec<(f64, f64)> = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
            for w in finite.windows(2) {
                draw_line(&mut img, to_px(w[0]), to_px(w[1]), colour);
            }
            if let [only] = finite.as_slice() {
                draw_line(&mut img, to_px(*only), to_px(*only), colour);
            }
        }
    }
    img.save(path).map_err(|e| PgdsError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), colour: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * t).round();
        let y = (a.1 + (b.1 - a.1) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = report(&[], dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "domain error: no runs");
    }

    #[test]
    fn plot_marks_the_series_colour() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        line_plot(&[vec![(0.0, 0.0), (1.0, 1.0)]], &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        let blue = Rgb(PALETTE[0].1);
        assert!(img.pixels().any(|px| *px == blue));
    }
}
