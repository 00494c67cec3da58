use super::{auc_alpha, ced_curve, ced_thresholds, failure_rate, mean, CedCurve, EvalConfig, NormKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StageMetrics {
    pub mean_error: f64,
    pub auc: f64,
    /// Percent.
    pub failure_rate: f64,
}

/// Metrics per stage plus the final-stage error of every image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub stages: Vec<StageMetrics>,
    pub ids: Vec<String>,
    /// Final-stage error per image, aligned with `ids`.
    pub errors: Vec<f64>,
}

impl EvalReport {
    pub fn from_errors(config: &EvalConfig, ids: Vec<String>, per_stage: Vec<Vec<f64>>) -> Result<Self> {
        let stages = per_stage
            .iter()
            .map(|e| {
                Ok(StageMetrics {
                    mean_error: mean(e),
                    auc: auc_alpha(e, config.alpha)?,
                    failure_rate: failure_rate(e, config.threshold)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let errors = per_stage
            .last()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("no stages to report".into()))?;
        Ok(EvalReport {
            config: *config,
            stages,
            ids,
            errors,
        })
    }

    pub fn final_stage(&self) -> &StageMetrics {
        self.stages.last().expect("at least one stage")
    }

    pub fn ced(&self) -> CedCurve {
        ced_curve(&self.errors, &ced_thresholds(self.config.alpha, self.config.ced_steps))
            .expect("a report holds at least one valid error")
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        let c = &self.config;
        kv("kind", c.kind.to_string());
        kv("alpha", c.alpha.to_string());
        kv("threshold", c.threshold.to_string());
        kv("ced_steps", c.ced_steps.to_string());
        kv("images", self.errors.len().to_string());
        kv("stages", self.stages.len().to_string());
        let last = self.final_stage();
        kv("mean_error", last.mean_error.to_string());
        kv("auc", last.auc.to_string());
        kv("failure_rate", last.failure_rate.to_string());
        for (i, s) in self.stages.iter().enumerate() {
            kv(&format!("stage{}.mean_error", i + 1), s.mean_error.to_string());
            kv(&format!("stage{}.auc", i + 1), s.auc.to_string());
            kv(&format!("stage{}.failure_rate", i + 1), s.failure_rate.to_string());
        }
        for (id, e) in self.ids.iter().zip(&self.errors) {
            kv(&format!("error[{id}]"), e.to_string());
        }
        out
    }

    /// Inverse of [`EvalReport::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("report: {m}"));
        let mut fields = std::collections::HashMap::new();
        let mut ids = Vec::new();
        let mut errors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.rsplit_once('=').ok_or_else(|| bad(format!("line {} is not key=value", n + 1)))?;
            if let Some(id) = k.strip_prefix("error[").and_then(|r| r.strip_suffix(']')) {
                ids.push(id.to_string());
                errors.push(v.parse::<f64>().map_err(|_| bad(format!("line {}: bad error value", n + 1)))?);
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing {k}")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidArgument(format!("report: bad {k} value {v:?}")))
        }
        let config = EvalConfig {
            kind: get("kind")?.parse::<NormKind>()?,
            alpha: num("alpha", get("alpha")?)?,
            threshold: num("threshold", get("threshold")?)?,
            ced_steps: num("ced_steps", get("ced_steps")?)?,
        };
        let n_stages: usize = num("stages", get("stages")?)?;
        let stages = (1..=n_stages)
            .map(|i| {
                let f = |name: &str| {
                    let k = format!("stage{i}.{name}");
                    num::<f64>(&k, get(&k)?)
                };
                Ok(StageMetrics {
                    mean_error: f("mean_error")?,
                    auc: f("auc")?,
                    failure_rate: f("failure_rate")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let images: usize = num("images", get("images")?)?;
        if images != errors.len() || errors.is_empty() || stages.is_empty() {
            return Err(bad(format!("{images} images declared, {} error lines", errors.len())));
        }
        Ok(EvalReport {
            config,
            stages,
            ids,
            errors,
        })
    }
}
