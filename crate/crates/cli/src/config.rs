//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use dan_core::datasets::LoadMode;
use dan_core::evaluation::EvalConfig;
use dan_core::model::StageArch;
use dan_core::training::TrainConfig;

/// Stage width preset: `full` or `reduced:N` (every conv width divided by N).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchSpec {
    Full,
    Reduced(usize),
}

impl ArchSpec {
    pub fn arch(self) -> StageArch {
        match self {
            ArchSpec::Full => StageArch::full(),
            ArchSpec::Reduced(d) => StageArch::reduced(d),
        }
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchSpec::Full => f.write_str("full"),
            ArchSpec::Reduced(d) => write!(f, "reduced:{d}"),
        }
    }
}

impl FromStr for ArchSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(ArchSpec::Full);
        }
        match s.strip_prefix("reduced:").map(str::parse::<usize>) {
            Some(Ok(d)) if d >= 1 => Ok(ArchSpec::Reduced(d)),
            _ => bail!("arch must be `full` or `reduced:N` with N >= 1, got {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub bbox_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to `model.dan` inside the output directory.
    pub model: Option<PathBuf>,
    pub strict: bool,
    pub stages: usize,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub const KEYS: &[&str] = &[
    "data_root",
    "bbox_manifest",
    "output_dir",
    "model",
    "strict",
    "stages",
    "arch",
    "learning_rate",
    "batch_size",
    "augment_count",
    "validation_size",
    "patience",
    "max_epochs",
    "dropout",
    "seed",
    "mirror_probability",
    "rotation_std_deg",
    "scale_std",
    "translation_std",
    "stop_when_stage_stalls",
    "target_val_error",
    "kind",
    "alpha",
    "threshold",
    "ced_steps",
];

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Parses config text. Relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut data_root = None;
        let mut output_dir = None;
        let mut bbox_manifest = None;
        let mut model = None;
        let mut strict = false;
        let mut stages = 2;
        let mut arch = ArchSpec::Full;
        let mut t = TrainConfig::default();
        let mut e = EvalConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("line {}", n + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}: expected `key = value`, got {line:?}", at()))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                bail!("{}: unknown key {k:?}", at());
            }
            if !seen.insert(k.to_string()) {
                bail!("{}: key {k:?} given twice", at());
            }
            let r: Result<()> = (|| {
                match k {
                    "data_root" => data_root = Some(base.join(v)),
                    "output_dir" => output_dir = Some(base.join(v)),
                    "bbox_manifest" => bbox_manifest = optional_path(v).map(|p| base.join(p)),
                    "model" => model = optional_path(v).map(|p| base.join(p)),
                    "strict" => strict = value(k, v)?,
                    "stages" => stages = value(k, v)?,
                    "arch" => arch = v.parse()?,
                    "learning_rate" => t.learning_rate = value(k, v)?,
                    "batch_size" => t.batch_size = value(k, v)?,
                    "augment_count" => t.augment_count = value(k, v)?,
                    "validation_size" => t.validation_size = value(k, v)?,
                    "patience" => t.patience = value(k, v)?,
                    "max_epochs" => t.max_epochs = value(k, v)?,
                    "dropout" => t.dropout = value(k, v)?,
                    "seed" => t.seed = value(k, v)?,
                    "mirror_probability" => t.augmentation.mirror_probability = value(k, v)?,
                    "rotation_std_deg" => t.augmentation.rotation_std_deg = value(k, v)?,
                    "scale_std" => t.augmentation.scale_std = value(k, v)?,
                    "translation_std" => t.augmentation.translation_std = value(k, v)?,
                    "stop_when_stage_stalls" => t.stop_when_stage_stalls = value(k, v)?,
                    "target_val_error" => t.target_val_error = if v == "none" { None } else { Some(value(k, v)?) },
                    "kind" => e.kind = value(k, v)?,
                    "alpha" => e.alpha = value(k, v)?,
                    "threshold" => e.threshold = value(k, v)?,
                    "ced_steps" => e.ced_steps = value(k, v)?,
                    _ => unreachable!("key list and match disagree"),
                }
                Ok(())
            })();
            r.with_context(at)?;
        }
        t.arch = arch.arch();
        let cfg = RunConfig {
            data_root: data_root.ok_or_else(|| anyhow!("missing required key data_root"))?,
            output_dir: output_dir.ok_or_else(|| anyhow!("missing required key output_dir"))?,
            bbox_manifest,
            model,
            strict,
            stages,
            arch,
            train: t,
            eval: e,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = std::path::absolute(path.parent().unwrap_or(Path::new("")))?;
        Self::parse(&text, &base).with_context(|| format!("config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            bail!("stages must be at least 1");
        }
        self.train.validate()?;
        let e = &self.eval;
        if !(e.alpha > 0.0 && e.alpha.is_finite()) || !(e.threshold >= 0.0 && e.threshold.is_finite()) || e.ced_steps == 0 {
            bail!("alpha must be positive, threshold non-negative and ced_steps at least 1");
        }
        Ok(())
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.output_dir.join("model.dan"))
    }

    pub fn load_mode(&self) -> LoadMode {
        if self.strict {
            LoadMode::Strict
        } else {
            LoadMode::Lenient
        }
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let a = &t.augmentation;
        let e = &self.eval;
        let values = [
            self.data_root.display().to_string(),
            show_path(&self.bbox_manifest),
            self.output_dir.display().to_string(),
            self.model_path().display().to_string(),
            self.strict.to_string(),
            self.stages.to_string(),
            self.arch.to_string(),
            t.learning_rate.to_string(),
            t.batch_size.to_string(),
            t.augment_count.to_string(),
            t.validation_size.to_string(),
            t.patience.to_string(),
            t.max_epochs.to_string(),
            t.dropout.to_string(),
            t.seed.to_string(),
            a.mirror_probability.to_string(),
            a.rotation_std_deg.to_string(),
            a.scale_std.to_string(),
            a.translation_std.to_string(),
            t.stop_when_stage_stalls.to_string(),
            t.target_val_error.map_or("none".into(), |v| v.to_string()),
            e.kind.to_string(),
            e.alpha.to_string(),
            e.threshold.to_string(),
            e.ced_steps.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
