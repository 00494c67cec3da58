//! Normalized landmark errors, cumulative error distributions and model
//! evaluation.

mod align;
mod report;

use std::fmt;
use std::str::FromStr;

use crate::datasets::FaceRecord;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Shape, LEFT_EYE_OUTER, RIGHT_EYE_OUTER};
use crate::model::{dan_forward_batch, DanModel};

pub use align::{square_center_box, two_step_align, TwoStepResult, DEFAULT_HEIGHT_FRACTION};
pub use report::{EvalReport, StageMetrics};

pub const DEFAULT_ALPHA: f64 = 0.08;
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.08;
pub const DEFAULT_CED_STEPS: usize = 100;

/// What a landmark error is divided by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// Distance between the outer eye corners.
    InterOcular,
    /// Distance between the centroids of the two eyes.
    InterPupil,
    /// Diagonal of a bounding box.
    BboxDiagonal,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::InterOcular => "interocular",
            NormKind::InterPupil => "interpupil",
            NormKind::BboxDiagonal => "diagonal",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interocular" => Ok(NormKind::InterOcular),
            "interpupil" => Ok(NormKind::InterPupil),
            "diagonal" => Ok(NormKind::BboxDiagonal),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalization {other:?} (interocular, interpupil or diagonal)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorSample {
    pub error: f64,
    pub kind: NormKind,
}

/// Distance between the eye centroids.
pub fn interpupil_distance(s: &Shape) -> f64 {
    let (l, r) = s.eye_centers();
    l.distance(r)
}

/// Distance between the outer eye corners.
pub fn interocular_distance(s: &Shape) -> f64 {
    s.points()[LEFT_EYE_OUTER].distance(s.points()[RIGHT_EYE_OUTER])
}

/// Mean landmark distance between `pred` and `gt` divided by the chosen
/// normalizer. `bbox` is required for [`NormKind::BboxDiagonal`].
pub fn normalized_error(pred: &Shape, gt: &Shape, kind: NormKind, bbox: Option<&BoundingBox>) -> Result<ErrorSample> {
    let norm = match kind {
        NormKind::InterOcular => interocular_distance(gt),
        NormKind::InterPupil => interpupil_distance(gt),
        NormKind::BboxDiagonal => bbox
            .ok_or_else(|| Error::InvalidArgument("diagonal normalization needs a bounding box".into()))?
            .diagonal(),
    };
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("{kind} normalizer is {norm}")));
    }
    Ok(ErrorSample {
        error: pred.mean_distance(gt) / norm,
        kind,
    })
}

/// Ordered `(threshold, fraction of errors <= threshold)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CedCurve {
    pub points: Vec<(f64, f64)>,
}

impl CedCurve {
    /// `threshold,fraction` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in &self.points {
            s.push_str(&format!("{t},{f}\n"));
        }
        s
    }
}

fn check_errors(errors: &[f64]) -> Result<()> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("no errors to summarize".into()));
    }
    if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::InvalidArgument("errors must be finite and non-negative".into()));
    }
    Ok(())
}

/// `steps + 1` evenly spaced thresholds from 0 to `alpha`.
pub fn ced_thresholds(alpha: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| alpha * i as f64 / steps.max(1) as f64).collect()
}

pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Result<CedCurve> {
    check_errors(errors)?;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(CedCurve {
        points: thresholds
            .iter()
            .map(|&t| (t, sorted.partition_point(|&e| e <= t) as f64 / n))
            .collect(),
    })
}

/// Area under the empirical CED on `[0, alpha]`, divided by `alpha`. Each
/// error `e` contributes `max(0, alpha - e) / alpha` of a sample's share.
pub fn auc_alpha(errors: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    check_errors(errors)?;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let area: f64 = sorted.iter().map(|&e| (alpha - e).max(0.0)).sum();
    Ok(area / (sorted.len() as f64 * alpha))
}

/// Percentage of errors at or above `threshold`.
pub fn failure_rate(errors: &[f64], threshold: f64) -> Result<f64> {
    check_errors(errors)?;
    let failed = errors.iter().filter(|&&e| e >= threshold).count();
    Ok(100.0 * failed as f64 / errors.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub kind: NormKind,
    pub alpha: f64,
    pub threshold: f64,
    pub ced_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            kind: NormKind::InterOcular,
            alpha: DEFAULT_ALPHA,
            threshold: DEFAULT_FAILURE_THRESHOLD,
            ced_steps: DEFAULT_CED_STEPS,
        }
    }
}

/// Runs the model from each record's detector box and summarizes every
/// stage. Diagonal normalization uses the ground-truth landmark box.
pub fn evaluate_model(model: &DanModel, records: &[FaceRecord], config: &EvalConfig) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to evaluate".into()));
    }
    let missing: Vec<&str> = records.iter().filter(|r| r.bbox.is_none()).map(|r| r.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "detector initialization needs a bounding box; missing for: {}",
            missing.join(", ")
        )));
    }
    let imgs: Vec<_> = records.iter().map(|r| &r.image).collect();
    let inits = records
        .iter()
        .map(|r| crate::geometry::place_shape_in_bbox(&model.canonical, r.bbox.as_ref().unwrap()))
        .collect::<Result<Vec<_>>>()?;
    let preds = dan_forward_batch(model, &imgs, &inits)?;
    let mut per_stage = vec![Vec::with_capacity(records.len()); model.stages.len()];
    for (r, stages) in records.iter().zip(&preds) {
        let gt_box = r.shape.bounding_box();
        for (t, s) in stages.iter().enumerate() {
            per_stage[t].push(normalized_error(s, &r.shape, config.kind, Some(&gt_box))?.error);
        }
    }
    let ids = records.iter().map(|r| r.id.clone()).collect();
    EvalReport::from_errors(config, ids, per_stage)
}
