use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dan_core::datasets::{format_pts, load_dataset, load_gray_image, LoadMode, LoadedDataset};
use dan_core::evaluation::{ced_curve, ced_thresholds, evaluate_model, two_step_align, EvalConfig, EvalReport};
use dan_core::geometry::{place_shape_in_bbox, BoundingBox};
use dan_core::model::{dan_forward, load_model, write_model};
use dan_core::training::{train_model, EpochLog};

use crate::config::RunConfig;

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const REPORT: &str = "report.txt";
pub const CED: &str = "ced.csv";

/// Writes through a sibling temporary file so a failed run never leaves a
/// partial artifact at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

fn require_dir(what: &str, p: &Path) -> Result<()> {
    if !p.is_dir() {
        bail!("{what} {} is not a directory", p.display());
    }
    Ok(())
}

fn require_file(what: &str, p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!("{what} {} is not a readable file", p.display());
    }
    Ok(())
}

fn require_parent(what: &str, p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => require_dir(&format!("parent of {what}"), d),
        _ => Ok(()),
    }
}

fn load(root: &Path, manifest: Option<&Path>, mode: LoadMode) -> Result<LoadedDataset> {
    let ds = load_dataset(root, manifest, mode)?;
    for issue in &ds.report.skipped {
        log::warn!("skipped {issue}");
    }
    for issue in &ds.report.warnings {
        log::warn!("{issue}");
    }
    if ds.records.is_empty() {
        bail!("no usable records under {}", root.display());
    }
    log::info!("loaded {} records from {}", ds.records.len(), root.display());
    Ok(ds)
}

pub fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    require_dir("data_root", &cfg.data_root)?;
    if let Some(m) = &cfg.bbox_manifest {
        require_file("bbox_manifest", m)?;
    }
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let model_path = cfg.model_path();
    require_parent("model", &model_path)?;

    write_atomic(&cfg.output_dir.join(RESOLVED_CONFIG), cfg.to_text().as_bytes())?;
    let ds = load(&cfg.data_root, cfg.bbox_manifest.as_deref(), cfg.load_mode())?;

    let log_path = cfg.output_dir.join(TRAIN_LOG);
    let mut log_file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log_file, "stage,{}", EpochLog::HEADER)?;
    let mut log_error = None;
    let outcome = train_model(&ds.records, cfg.stages, &cfg.train, &mut |t, e| {
        log::info!(
            "stage {} epoch {}: train loss {:.5}, validation error {:.5}",
            t + 1,
            e.epoch,
            e.train_loss,
            e.val_error
        );
        if log_error.is_none() {
            if let Err(err) = writeln!(log_file, "{},{e}", t + 1).and_then(|_| log_file.flush()) {
                log_error = Some(err);
            }
        }
    })?;
    if let Some(err) = log_error {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }

    write_atomic(&model_path, &write_model(&outcome.model)?)?;
    for (t, e) in outcome.stage_errors.iter().enumerate() {
        println!("stage {}: best validation error {e:.6}", t + 1);
    }
    println!("model: {}", model_path.display());
    Ok(())
}

pub struct EvalArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub bboxes: Option<PathBuf>,
    pub strict: bool,
    pub config: EvalConfig,
    pub output_dir: PathBuf,
}

pub fn stage_table(report: &EvalReport) -> String {
    let mut out = format!("{:<6} {:>12} {:>10} {:>13}\n", "stage", "mean_error", "auc", "failure_pct");
    for (i, s) in report.stages.iter().enumerate() {
        out.push_str(&format!("{:<6} {:>12.6} {:>10.6} {:>13.4}\n", i + 1, s.mean_error, s.auc, s.failure_rate));
    }
    out
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    require_file("model", &args.model)?;
    require_dir("data", &args.data)?;
    if let Some(b) = &args.bboxes {
        require_file("bbox manifest", b)?;
    }
    std::fs::create_dir_all(&args.output_dir).with_context(|| format!("creating {}", args.output_dir.display()))?;

    let model = load_model(&args.model)?;
    let mode = if args.strict { LoadMode::Strict } else { LoadMode::Lenient };
    let ds = load(&args.data, args.bboxes.as_deref(), mode)?;
    let report = evaluate_model(&model, &ds.records, &args.config)?;

    write_atomic(&args.output_dir.join(REPORT), report.to_text().as_bytes())?;
    write_atomic(&args.output_dir.join(CED), report.ced().to_csv().as_bytes())?;
    let last = report.final_stage();
    println!(
        "{} images, {} error: mean {:.6}, AUC@{} {:.6}, failures {:.4}%",
        report.errors.len(),
        report.config.kind,
        last.mean_error,
        report.config.alpha,
        last.auc,
        last.failure_rate
    );
    print!("{}", stage_table(&report));
    Ok(())
}

pub enum Init {
    Box(BoundingBox),
    TwoStep { height_fraction: f64 },
}

pub fn cmd_align(model: &Path, image: &Path, init: &Init, output: &Path) -> Result<()> {
    require_file("model", model)?;
    require_file("image", image)?;
    require_parent("output", output)?;
    let model = load_model(model)?;
    let bytes = std::fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let img = load_gray_image(&bytes).with_context(|| format!("decoding {}", image.display()))?;
    let shape = match init {
        Init::Box(b) => {
            let s0 = place_shape_in_bbox(&model.canonical, b)?;
            dan_forward(&model, &img, &s0)?.pop().expect("a model has stages")
        }
        Init::TwoStep { height_fraction } => {
            let r = two_step_align(&model, &img, *height_fraction)?;
            log::info!(
                "step-1 box: side {} at ({}, {}); second step {}",
                r.step1_box.width,
                r.step1_box.x,
                r.step1_box.y,
                if r.refined { "applied" } else { "skipped" }
            );
            r.shape
        }
    };
    write_atomic(output, format_pts(&shape).as_bytes())?;
    println!("landmarks: {}", output.display());
    Ok(())
}

pub fn cmd_ced(report: &Path, alpha: Option<f64>, steps: Option<usize>, output: &Path) -> Result<()> {
    require_file("report", report)?;
    require_parent("output", output)?;
    let text = std::fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
    let r = EvalReport::parse(&text).with_context(|| format!("parsing {}", report.display()))?;
    let alpha = alpha.unwrap_or(r.config.alpha);
    let steps = steps.unwrap_or(r.config.ced_steps);
    if !(alpha > 0.0 && alpha.is_finite()) || steps == 0 {
        bail!("alpha must be positive and steps at least 1");
    }
    let curve = ced_curve(&r.errors, &ced_thresholds(alpha, steps))?;
    write_atomic(output, curve.to_csv().as_bytes())?;
    println!("ced: {} ({} points up to {alpha})", output.display(), curve.points.len());
    Ok(())
}
