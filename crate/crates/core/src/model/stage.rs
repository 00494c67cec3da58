use rand::{RngCore, SeedableRng};

use super::{StageParams, FRAME};
use crate::autodiff::{BatchNormState, BnMode, Graph, Mode, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// Where a stage's feature-image channel comes from.
pub enum FeatureInput<T> {
    /// First stage: no feature channel.
    None,
    /// A ready 112x112 feature image per sample, `[N, 1, 112, 112]`.
    Image(Tensor<T>),
    /// Previous-stage fc1 activations `[N, fc1]`, run through this stage's
    /// feature layer inside the graph.
    FromFc1(Tensor<T>),
}

/// Handles into a recorded stage.
pub struct StageGraph {
    pub delta: Var,
    pub fc1: Var,
    /// Batch-norm outputs, conv layers first then fc1.
    pub bn_nodes: Vec<Var>,
    /// Output of every layer, in the order of [`super::StageArch::layer_rows`].
    pub layers: Vec<Var>,
}

impl StageGraph {
    /// Folds the batch statistics of a training pass into the running
    /// estimates.
    pub fn update_running<T: Real>(&self, g: &Graph<T>, stage: &mut StageParams) -> Result<()> {
        let mut states: Vec<_> = stage.convs.iter_mut().map(|c| &mut c.bn).collect();
        states.push(&mut stage.fc1.bn);
        for (state, &node) in states.into_iter().zip(&self.bn_nodes) {
            if let Some(stats) = g.batch_stats(node) {
                state.update_running(stats)?;
            }
        }
        Ok(())
    }
}

/// Registers `stage`'s trainable tensors as graph parameters in
/// [`StageParams::trainable_mut`] order.
pub fn register_params<T: Real>(g: &mut Graph<T>, stage: &StageParams) -> Vec<Var> {
    stage.trainable_tensors().into_iter().map(|t| g.param(t)).collect()
}

/// Stacks per-sample planes into `[N, planes, 112, 112]`.
pub fn planes_tensor<T: Real>(samples: &[Vec<&GrayImage>]) -> Result<Tensor<T>> {
    let per = samples.first().map_or(0, |s| s.len());
    let mut data = Vec::with_capacity(samples.len() * per * FRAME * FRAME);
    for planes in samples {
        if planes.len() != per {
            return Err(Error::shape("stage input", "samples carry different plane counts"));
        }
        for img in planes {
            if img.width() != FRAME || img.height() != FRAME {
                return Err(Error::shape(
                    "stage input",
                    format!("expected {FRAME}x{FRAME}, got {}x{}", img.width(), img.height()),
                ));
            }
            data.extend(img.data().iter().map(|&v| T::from_f64(v)));
        }
    }
    Tensor::new(&[samples.len(), per, FRAME, FRAME], data)
}

fn bn_mode(state: &BatchNormState, mode: Mode) -> BnMode<'_> {
    match mode {
        Mode::Train => BnMode::Train {
            epsilon: state.epsilon as f64,
        },
        Mode::Infer => state.infer_mode(),
    }
}

/// Records one stage on `g`. `params` are leaves from [`register_params`]
/// (or any tensors of the same extents); `planes` holds the image channel,
/// plus the heatmap channel on later stages. Batch-norm running statistics
/// are read from `stage`.
#[allow(clippy::too_many_arguments)]
pub fn build_stage<T: Real>(
    g: &mut Graph<T>,
    stage: &StageParams,
    params: &[Var],
    planes: Var,
    feature: FeatureInput<T>,
    mode: Mode,
    dropout: f64,
    rng: &mut dyn RngCore,
) -> Result<StageGraph> {
    let n = g.value(planes).shape()[0];
    let expected: Vec<Vec<usize>> = stage.trainable_shapes();
    if params.len() != expected.len() || params.iter().zip(&expected).any(|(&v, s)| g.value(v).shape() != &s[..]) {
        return Err(Error::shape("stage parameters", "parameters do not match the stage layout"));
    }
    let mut bn_nodes = Vec::new();
    let mut layers = Vec::with_capacity(14);
    let conv_params: Vec<(Var, Var, Var)> = params.chunks(3).take(stage.convs.len()).map(|c| (c[0], c[1], c[2])).collect();
    let rest = &params[3 * stage.convs.len()..];
    let (fc1_w, fc1_s, fc1_b, fc2_w, fc2_b) = (rest[0], rest[1], rest[2], rest[3], rest[4]);

    let input = match (feature, &stage.feature) {
        (FeatureInput::None, None) => planes,
        (FeatureInput::Image(img), Some(_)) => {
            let f = g.input(img);
            g.concat_channels(&[planes, f])?
        }
        (FeatureInput::FromFc1(prev), Some(_)) => {
            let (w, b) = (rest[5], rest[6]);
            let x = g.input(prev);
            let f = g.dense(x, w, Some(b))?;
            let f = g.relu(f);
            let side = stage.arch.feature_side();
            let f = g.reshape(f, &[n, 1, side, side])?;
            let f = g.upscale2x(f)?;
            g.concat_channels(&[planes, f])?
        }
        (FeatureInput::None, Some(_)) => {
            return Err(Error::InvalidArgument("this stage needs a feature image".into()));
        }
        (_, None) => {
            return Err(Error::InvalidArgument("the first stage takes no feature image".into()));
        }
    };
    let expected = stage.input_channels();
    if g.value(input).shape()[1] != expected {
        return Err(Error::shape(
            "stage input",
            format!("{} channels, stage expects {expected}", g.value(input).shape()[1]),
        ));
    }

    let mut x = input;
    for (i, (c, &(k, s, b))) in stage.convs.iter().zip(&conv_params).enumerate() {
        x = g.conv2d(x, k, 1, 1)?;
        x = g.batch_norm(x, s, b, bn_mode(&c.bn, mode))?;
        bn_nodes.push(x);
        x = g.relu(x);
        layers.push(x);
        if i % 2 == 1 {
            x = g.max_pool2d(x)?;
            layers.push(x);
        }
    }
    let flat = g.value(x).len() / n;
    x = g.reshape(x, &[n, flat])?;
    x = g.dropout(x, dropout, mode, rng)?;
    x = g.dense(x, fc1_w, None)?;
    x = g.batch_norm(x, fc1_s, fc1_b, bn_mode(&stage.fc1.bn, mode))?;
    bn_nodes.push(x);
    let fc1 = g.relu(x);
    let delta = g.dense(fc1, fc2_w, Some(fc2_b))?;
    layers.extend([fc1, delta]);
    Ok(StageGraph {
        delta,
        fc1,
        bn_nodes,
        layers,
    })
}

/// Landmark update and fc1 activations of one stage on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    /// Interleaved `dx0, dy0, ...`, 136 values.
    pub delta: Vec<f64>,
    pub fc1: Vec<f32>,
}

/// Runs one stage on a single 112x112 sample. The first stage reads only
/// `img`; heatmap and feature image, if given, must be all zero. Training
/// mode normalizes with batch statistics and so needs more than one
/// sample; it is rejected here.
pub fn stage_forward(
    stage: &StageParams,
    img: &GrayImage,
    heatmap: Option<&GrayImage>,
    feature: Option<&GrayImage>,
    mode: Mode,
) -> Result<StageOutput> {
    if mode == Mode::Train {
        return Err(Error::InvalidArgument(
            "training-mode batch normalization needs a batch of at least two samples".into(),
        ));
    }
    let first = stage.feature.is_none();
    let mut planes = vec![img];
    let mut feat = FeatureInput::None;
    for extra in [heatmap, feature].into_iter().flatten() {
        if extra.width() != FRAME || extra.height() != FRAME {
            return Err(Error::shape("stage input", "heatmap and feature image must be 112x112"));
        }
    }
    if first {
        if [heatmap, feature].into_iter().flatten().any(|p| p.data().iter().any(|&v| v != 0.0)) {
            return Err(Error::InvalidArgument("the first stage takes zero heatmap and feature planes".into()));
        }
    } else {
        let (h, f) = heatmap
            .zip(feature)
            .ok_or_else(|| Error::InvalidArgument("later stages need a heatmap and a feature image".into()))?;
        planes.push(h);
        feat = FeatureInput::Image(planes_tensor::<f32>(&[vec![f]])?);
    }
    let mut g = Graph::<f32>::new();
    let params = register_params(&mut g, stage);
    let x = g.input(planes_tensor(&[planes])?);
    let sg = build_stage(&mut g, stage, &params, x, feat, Mode::Infer, 0.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    Ok(StageOutput {
        delta: g.value(sg.delta).data().iter().map(|&v| v as f64).collect(),
        fc1: g.value(sg.fc1).data().to_vec(),
    })
}
