//! Sequential stage-wise training with the inter-pupil normalized loss,
//! Adam and data augmentation.

mod adam;
mod augment;

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, PointTarget, Tensor};
use crate::datasets::{split_validation, FaceRecord};
use crate::error::{Error, Result};
use crate::evaluation::{interocular_distance, interpupil_distance};
use crate::geometry::{compute_canonical_shape, place_shape_in_bbox, CanonicalShapeConfig, Point, Shape};
use crate::imaging::GrayImage;
use crate::model::{
    advance_batch, build_stage, connect_geometry, register_params, DanModel, FeatureInput, Progress, StageArch,
    StageParams, FRAME,
};

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use augment::{augment, AugmentConfig};

const EVAL_CHUNK: usize = 32;

/// Mean landmark distance divided by the ground-truth distance between the
/// eye centroids.
pub fn interpupil_loss(pred: &Shape, gt: &Shape) -> Result<f64> {
    let d = interpupil_distance(gt);
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Degenerate(format!("inter-pupil distance is {d}")));
    }
    Ok(pred.mean_distance(gt) / d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Augmented copies made of each training image.
    pub augment_count: usize,
    pub validation_size: usize,
    /// Epochs without a validation improvement before a stage stops.
    pub patience: usize,
    pub max_epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub arch: StageArch,
    pub augmentation: AugmentConfig,
    /// Drop a new stage, and stop adding more, when it does not lower the
    /// validation error.
    pub stop_when_stage_stalls: bool,
    /// Stop a stage as soon as its validation error falls below this.
    pub target_val_error: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 64,
            augment_count: 10,
            validation_size: 100,
            patience: 10,
            max_epochs: 200,
            dropout: 0.5,
            seed: 0,
            arch: StageArch::full(),
            augmentation: AugmentConfig::default(),
            stop_when_stage_stalls: false,
            target_val_error: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.batch_size == 0 || self.augment_count == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch size, augmentation count, patience and max epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.arch.widths.contains(&0) || self.arch.fc1 == 0 {
            return bad(format!("architecture {:?} has an empty layer", self.arch));
        }
        self.augmentation.validate()
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 0 is the state before the first update.
    pub epoch: usize,
    /// Mean loss over the epoch's batches; for epoch 0, over the training
    /// set in inference mode.
    pub train_loss: f64,
    /// Mean inter-ocular error on the validation set.
    pub val_error: f64,
    /// Seconds since the stage started.
    pub wall_time: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_error,wall_time";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{:.3}", self.epoch, self.train_loss, self.val_error, self.wall_time)
    }
}

#[derive(Clone, Debug)]
pub struct StageResult {
    /// Parameters from the epoch with the lowest validation error.
    pub params: StageParams,
    pub best_epoch: usize,
    pub best_val_error: f64,
    pub log: Vec<EpochLog>,
}

/// A sample ready for one stage: its input planes, the previous stage's
/// fc1 activations and the loss target.
struct Prepared {
    planes: Vec<f32>,
    fc1: Option<Vec<f32>>,
    target: PointTarget,
    gt: Shape,
}

fn finish(target: &PointTarget, delta: &[f32]) -> Result<Shape> {
    let coords: Vec<f64> = target.base.iter().zip(delta).map(|(b, &d)| b + d as f64).collect();
    let s = Shape::from_interleaved(&coords)?;
    Ok(s.map(|p| {
        Point::new(
            target.a * p.x - target.b * p.y + target.tx,
            target.b * p.x + target.a * p.y + target.ty,
        )
    }))
}

/// Runs the frozen stages before `t` and forms stage `t`'s inputs.
fn prepare(model: &DanModel, t: usize, records: &[FaceRecord]) -> Result<Vec<Prepared>> {
    let stds: Vec<GrayImage> = records.iter().map(|r| r.image.standardized()).collect();
    let refs: Vec<&GrayImage> = stds.iter().collect();
    let mut progress = records
        .iter()
        .map(|r| {
            Ok(Progress {
                shape: place_shape_in_bbox(&model.canonical, &r.training_box())?,
                fc1: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for k in 0..t {
        advance_batch(model, k, &refs, &mut progress)?;
    }
    records
        .iter()
        .zip(&refs)
        .zip(progress)
        .map(|((r, img), p)| {
            let conn = connect_geometry(model, t, img, &p.shape)?;
            let mut planes: Vec<f32> = conn.warped.data().iter().map(|&v| v as f32).collect();
            if let Some(h) = &conn.heatmap {
                planes.extend(h.data().iter().map(|&v| v as f32));
            }
            let inv = conn.inverse;
            let weight = 1.0 / interpupil_distance(&r.shape);
            if !weight.is_finite() {
                return Err(Error::Degenerate(format!("{}: eye centers coincide", r.id)));
            }
            Ok(Prepared {
                planes,
                fc1: p.fc1,
                target: PointTarget {
                    base: conn.base.to_interleaved(),
                    a: inv.a,
                    b: inv.b,
                    tx: inv.tx,
                    ty: inv.ty,
                    target: r.shape.to_interleaved(),
                    weight,
                },
                gt: r.shape.clone(),
            })
        })
        .collect()
}

fn batch_inputs(items: &[&Prepared]) -> Result<(Tensor<f32>, FeatureInput<f32>)> {
    let channels = items[0].planes.len() / (FRAME * FRAME);
    let mut data = Vec::with_capacity(items.len() * channels * FRAME * FRAME);
    for p in items {
        data.extend_from_slice(&p.planes);
    }
    let x = Tensor::new(&[items.len(), channels, FRAME, FRAME], data)?;
    let feature = match items[0].fc1.as_ref() {
        None => FeatureInput::None,
        Some(first) => {
            let mut f = Vec::with_capacity(items.len() * first.len());
            for p in items {
                f.extend_from_slice(p.fc1.as_ref().expect("every sample has fc1"));
            }
            FeatureInput::FromFc1(Tensor::new(&[items.len(), first.len()], f)?)
        }
    };
    Ok((x, feature))
}

/// Inference over prepared samples: (mean loss, mean inter-ocular error).
fn score(stage: &StageParams, samples: &[Prepared]) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss, mut err) = (0.0, 0.0);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let items: Vec<&Prepared> = chunk.iter().collect();
        let (x, feature) = batch_inputs(&items)?;
        let mut g = Graph::<f32>::new();
        let params = register_params(&mut g, stage);
        let x = g.input(x);
        let sg = build_stage(&mut g, stage, &params, x, feature, Mode::Infer, 0.0, &mut rng)?;
        let deltas = g.value(sg.delta).data().to_vec();
        let l = g.mean_point_distance(sg.delta, chunk.iter().map(|p| p.target.clone()).collect())?;
        loss += g.value(l).data()[0] as f64 * chunk.len() as f64;
        let dim = deltas.len() / chunk.len();
        for (p, d) in chunk.iter().zip(deltas.chunks(dim)) {
            err += finish(&p.target, d)?.mean_distance(&p.gt) / interocular_distance(&p.gt);
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, err / n))
}

/// Splits shuffled indices into batches, folding a trailing single sample
/// into the previous batch (batch normalization needs two).
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Trains `model.stages[stage_index]` with every earlier stage frozen and
/// run in inference mode. `on_epoch` sees each log line as it is produced.
pub fn train_stage(
    model: &DanModel,
    stage_index: usize,
    train: &[FaceRecord],
    val: &[FaceRecord],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<StageResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut stage = model
        .stages
        .get(stage_index)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("model has no stage {stage_index}")))?;
    let start = Instant::now();
    let train_set = prepare(model, stage_index, train)?;
    let val_set = prepare(model, stage_index, val)?;

    let mut adam = AdamState::new(stage.trainable_mut().iter().map(|p| p.len()));
    let mut rng = config.rng(100 + stage_index as u64);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let (loss0, _) = score(&stage, &train_set)?;
    let first = EpochLog {
        epoch: 0,
        train_loss: loss0,
        val_error: score(&stage, &val_set)?.1,
        wall_time: start.elapsed().as_secs_f64(),
    };
    on_epoch(&first);
    let mut log = vec![first];
    let mut best = (stage.clone(), 0, first.val_error);
    let mut stale = 0;
    let reached = config.target_val_error.is_some_and(|t| first.val_error < t);
    let epochs = if reached { 0 } else { config.max_epochs };

    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in batches(&order, config.batch_size) {
            let items: Vec<&Prepared> = batch.iter().map(|&i| &train_set[i]).collect();
            let (x, feature) = batch_inputs(&items)?;
            let mut g = Graph::<f32>::new();
            let params = register_params(&mut g, &stage);
            let x = g.input(x);
            // Single-sample batches normalize with the running estimates.
            let mode = if items.len() > 1 { Mode::Train } else { Mode::Infer };
            let sg = build_stage(&mut g, &stage, &params, x, feature, mode, config.dropout, &mut rng)?;
            let loss = g.mean_point_distance(sg.delta, items.iter().map(|p| p.target.clone()).collect())?;
            total += g.value(loss).data()[0] as f64 * items.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = params
                .iter()
                .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(|t| t.data()).collect();
            adam_step(&mut stage.trainable_mut(), &grad_refs, &mut adam, config.learning_rate)?;
            sg.update_running(&g, &mut stage)?;
        }
        let entry = EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_error: score(&stage, &val_set)?.1,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        if entry.val_error < best.2 {
            best = (stage.clone(), epoch, entry.val_error);
            stale = 0;
            if config.target_val_error.is_some_and(|t| entry.val_error < t) {
                break;
            }
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(StageResult {
        params: best.0,
        best_epoch: best.1,
        best_val_error: best.2,
        log,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DanModel,
    /// One log per trained stage.
    pub logs: Vec<Vec<EpochLog>>,
    /// Best validation error after each stage.
    pub stage_errors: Vec<f64>,
    /// Identifiers of the records held out for validation.
    pub validation_ids: Vec<String>,
}

/// Holds out a validation subset, computes the canonical shape from the
/// remaining ground truth, augments the training images and trains
/// `n_stages` stages one after another.
pub fn train_model(
    records: &[FaceRecord],
    n_stages: usize,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("no training records".into()));
    }
    if n_stages == 0 {
        return Err(Error::InvalidArgument("a model needs at least one stage".into()));
    }
    let split = split_validation(records.to_vec(), config.validation_size, config.seed)?;
    if split.validation.is_empty() {
        return Err(Error::InvalidArgument("validation size must be positive".into()));
    }
    let shapes: Vec<Shape> = split.train.iter().map(|r| r.shape.clone()).collect();
    let canonical = compute_canonical_shape(&shapes, &CanonicalShapeConfig::default())?;

    let mut aug_rng = config.rng(1);
    let mut train = Vec::with_capacity(split.train.len() * config.augment_count);
    for r in &split.train {
        train.extend(augment(r, config.augment_count, &config.augmentation, &mut aug_rng)?);
    }
    let mut model = DanModel::new(canonical, config.arch, n_stages, &mut config.rng(2))?;

    let mut logs = Vec::new();
    let mut stage_errors: Vec<f64> = Vec::new();
    for t in 0..n_stages {
        let result = train_stage(&model, t, &train, &split.validation, config, &mut |e| on_epoch(t, e))?;
        logs.push(result.log);
        let stalled = stage_errors.last().is_some_and(|&prev| result.best_val_error >= prev);
        if config.stop_when_stage_stalls && stalled {
            log::info!("stage {} did not lower the validation error; stopping at {t} stages", t + 1);
            model = model.truncated(t)?;
            break;
        }
        model.stages[t] = result.params;
        stage_errors.push(result.best_val_error);
    }
    Ok(TrainOutcome {
        model,
        logs,
        stage_errors,
        validation_ids: split.validation.iter().map(|r| r.id.clone()).collect(),
    })
}
