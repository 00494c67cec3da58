use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dan_cli::commands::{self, EvalArgs, Init};
use dan_cli::RunConfig;
use dan_core::evaluation::{EvalConfig, NormKind, DEFAULT_HEIGHT_FRACTION};
use dan_core::geometry::BoundingBox;

#[derive(Parser)]
#[command(name = "dan", version, about = "Multi-stage face alignment: training, evaluation and landmark prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a `key = value` run configuration.
    Train {
        /// Run configuration file.
        config: PathBuf,
    },
    /// Evaluate a model on an annotated image directory.
    Eval(EvalCli),
    /// Predict the landmarks of one image.
    Align(AlignCli),
    /// Recompute a CED curve from a stored evaluation report.
    Ced {
        #[arg(long)]
        report: PathBuf,
        /// Upper end of the curve; defaults to the report's alpha.
        #[arg(long)]
        alpha: Option<f64>,
        /// Number of curve intervals; defaults to the report's setting.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, short)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct EvalCli {
    /// Run configuration supplying the model, data and metric settings;
    /// explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory of `.pgm` / `.pts` pairs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Detector-box manifest (`stem x y width height` lines).
    #[arg(long)]
    bboxes: Option<PathBuf>,
    /// Fail on the first unreadable or unpaired file.
    #[arg(long)]
    strict: bool,
    /// interocular, interpupil or diagonal.
    #[arg(long)]
    kind: Option<NormKind>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Errors at or above this count as failures.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    ced_steps: Option<usize>,
    /// Directory receiving the report and CED files.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("init").required(true).multiple(false).args(["bbox", "two_step"]))]
struct AlignCli {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Initialization box as `x,y,width,height`.
    #[arg(long, value_parser = parse_box, allow_hyphen_values = true)]
    bbox: Option<BoundingBox>,
    /// Initialize from a centered square box, then realign on the normalized image.
    #[arg(long)]
    two_step: bool,
    /// Side of the centered box as a fraction of the image height.
    #[arg(long, default_value_t = DEFAULT_HEIGHT_FRACTION, requires = "two_step")]
    height_fraction: f64,
    /// Output landmark file.
    #[arg(long, short)]
    output: PathBuf,
}

fn parse_box(s: &str) -> Result<BoundingBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("{t:?} is not a number")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] => BoundingBox::new(x, y, w, h).map_err(|e| e.to_string()),
        _ => Err(format!("expected x,y,width,height, got {} values", v.len())),
    }
}

fn eval_args(a: EvalCli) -> Result<EvalArgs> {
    let base = a.config.as_deref().map(RunConfig::load).transpose()?;
    let from_cfg = |f: fn(&RunConfig) -> Option<PathBuf>| base.as_ref().and_then(f);
    let model = a
        .model
        .or_else(|| from_cfg(|c| Some(c.model_path())))
        .context("--model is required without --config")?;
    let data = a
        .data
        .or_else(|| from_cfg(|c| Some(c.data_root.clone())))
        .context("--data is required without --config")?;
    let bboxes = a.bboxes.or_else(|| from_cfg(|c| c.bbox_manifest.clone()));
    let d = base.as_ref().map_or(EvalConfig::default(), |c| c.eval);
    let config = EvalConfig {
        kind: a.kind.unwrap_or(d.kind),
        alpha: a.alpha.unwrap_or(d.alpha),
        threshold: a.threshold.unwrap_or(d.threshold),
        ced_steps: a.ced_steps.unwrap_or(d.ced_steps),
    };
    if !(config.alpha > 0.0 && config.alpha.is_finite()) || !(config.threshold >= 0.0) || config.ced_steps == 0 {
        anyhow::bail!("alpha must be positive, threshold non-negative and ced steps at least 1");
    }
    Ok(EvalArgs {
        model,
        data,
        bboxes,
        strict: a.strict || base.as_ref().is_some_and(|c| c.strict),
        config,
        output_dir: a.output,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => commands::cmd_train(&config),
        Command::Eval(a) => commands::cmd_eval(&eval_args(a)?),
        Command::Align(a) => {
            let init = match a.bbox {
                Some(b) => Init::Box(b),
                None => Init::TwoStep {
                    height_fraction: a.height_fraction,
                },
            };
            commands::cmd_align(&a.model, &a.image, &init, &a.output)
        }
        Command::Ced {
            report,
            alpha,
            steps,
            output,
        } => commands::cmd_ced(&report, alpha, steps, &output),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
