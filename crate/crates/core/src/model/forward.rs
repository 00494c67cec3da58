use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::stage::{build_stage, planes_tensor, register_params, FeatureInput};
use super::{DanModel, DenseLayer, FRAME};
use crate::autodiff::{Graph, Mode, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{estimate_similarity, Shape, SimilarityTransform};
use crate::imaging::{generate_heatmap, warp_image, GrayImage};

const INFER_CHUNK: usize = 16;

/// Inputs a stage receives, plus the transform that produced them.
#[derive(Clone, Debug)]
pub struct Connection {
    pub warped: GrayImage,
    /// Absent for the first stage.
    pub heatmap: Option<GrayImage>,
    /// Absent for the first stage, or when only the geometry was requested.
    pub feature: Option<GrayImage>,
    /// Maps image coordinates into the canonical frame.
    pub transform: SimilarityTransform,
    pub inverse: SimilarityTransform,
    /// The incoming shape in the canonical frame.
    pub base: Shape,
}

impl Connection {
    /// Adds an interleaved landmark update in the canonical frame and maps
    /// the result back to image coordinates.
    pub fn finish(&self, delta: &[f64]) -> Result<Shape> {
        let mut coords = self.base.to_interleaved();
        if delta.len() != coords.len() {
            return Err(Error::shape("stage update", format!("{} values for {} coordinates", delta.len(), coords.len())));
        }
        for (c, d) in coords.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(self.inverse.apply(&Shape::from_interleaved(&coords)?))
    }
}

/// Warp, transform and heatmap for stage `stage_index` given the shape
/// `s` produced so far. `img` is the standardized input image.
pub(crate) fn connect_geometry(model: &DanModel, stage_index: usize, img: &GrayImage, s: &Shape) -> Result<Connection> {
    let transform = estimate_similarity(s, &model.canonical)?;
    let inverse = transform.inverse()?;
    let warped = warp_image(img, &transform, FRAME, FRAME)?;
    let base = transform.apply(s);
    let heatmap = (stage_index > 0).then(|| generate_heatmap(&base, FRAME, FRAME, model.radius));
    Ok(Connection {
        warped,
        heatmap,
        feature: None,
        transform,
        inverse,
        base,
    })
}

/// 112x112 feature image from fc1 activations.
pub fn feature_image(layer: &DenseLayer, fc1: &[f32]) -> Result<GrayImage> {
    let inputs = layer.weight.shape()[1];
    if fc1.len() != inputs {
        return Err(Error::shape("feature layer", format!("{} activations, layer takes {inputs}", fc1.len())));
    }
    let side = (layer.weight.shape()[0] as f64).sqrt() as usize;
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new(&[1, inputs], fc1.to_vec())?);
    let w = g.input(layer.weight.clone());
    let b = g.input(layer.bias.clone());
    let f = g.dense(x, w, Some(b))?;
    let f = g.relu(f);
    let f = g.reshape(f, &[1, 1, side, side])?;
    let f = g.upscale2x(f)?;
    GrayImage::new(2 * side, 2 * side, g.value(f).data().iter().map(|&v| v as f64).collect())
}

/// Connection layer feeding stage `stage_index` (0-based): the image warped
/// by the transform taking `s` onto the canonical shape, the heatmap of the
/// transformed shape and the feature image of the previous stage's fc1
/// activations. `img` should be the standardized input image.
pub fn connection_forward(
    model: &DanModel,
    stage_index: usize,
    img: &GrayImage,
    s: &Shape,
    fc1_prev: Option<&[f32]>,
) -> Result<Connection> {
    let stage = model
        .stages
        .get(stage_index)
        .ok_or_else(|| Error::InvalidArgument(format!("no stage {stage_index}")))?;
    let mut conn = connect_geometry(model, stage_index, img, s)?;
    if let Some(layer) = &stage.feature {
        let fc1 = fc1_prev.ok_or_else(|| Error::InvalidArgument("later stages need fc1 activations".into()))?;
        conn.feature = Some(feature_image(layer, fc1)?);
    }
    Ok(conn)
}

/// Per-sample state between stages.
#[derive(Clone, Debug)]
pub(crate) struct Progress {
    pub shape: Shape,
    pub fc1: Option<Vec<f32>>,
}

/// Runs stage `t` in inference mode over every sample, in chunks.
pub(crate) fn advance_batch(model: &DanModel, t: usize, imgs: &[&GrayImage], progress: &mut [Progress]) -> Result<()> {
    let stage = &model.stages[t];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (imgs, progress) in imgs.chunks(INFER_CHUNK).zip(progress.chunks_mut(INFER_CHUNK)) {
        let conns = imgs
            .iter()
            .zip(progress.iter())
            .map(|(img, p)| connect_geometry(model, t, img, &p.shape))
            .collect::<Result<Vec<_>>>()?;
        let planes: Vec<Vec<&GrayImage>> = conns
            .iter()
            .map(|c| std::iter::once(&c.warped).chain(c.heatmap.as_ref()).collect())
            .collect();
        let feature = if t == 0 {
            FeatureInput::None
        } else {
            let mut data = Vec::new();
            for p in progress.iter() {
                data.extend_from_slice(
                    p.fc1
                        .as_deref()
                        .ok_or_else(|| Error::InvalidArgument("missing fc1 activations".into()))?,
                );
            }
            FeatureInput::FromFc1(Tensor::new(&[progress.len(), data.len() / progress.len()], data)?)
        };
        let mut g = Graph::<f32>::new();
        let params = register_params(&mut g, stage);
        let x = g.input(planes_tensor(&planes)?);
        let sg = build_stage(&mut g, stage, &params, x, feature, Mode::Infer, 0.0, &mut rng)?;
        let deltas = g.value(sg.delta).data();
        let fc1s = g.value(sg.fc1).data();
        let (dd, fd) = (deltas.len() / progress.len(), fc1s.len() / progress.len());
        for (i, (p, c)) in progress.iter_mut().zip(&conns).enumerate() {
            let delta: Vec<f64> = deltas[i * dd..(i + 1) * dd].iter().map(|&v| v as f64).collect();
            p.shape = c.finish(&delta)?;
            p.fc1 = Some(fc1s[i * fd..(i + 1) * fd].to_vec());
        }
    }
    Ok(())
}

/// Applies every stage in turn, starting from `init`, and returns the shape
/// after each stage in the coordinates of `img`. The image is standardized
/// internally; the first stage normalizes `init` onto the canonical shape,
/// which is the identity when `init` already is the canonical shape.
pub fn dan_forward(model: &DanModel, img: &GrayImage, init: &Shape) -> Result<Vec<Shape>> {
    let std = img.standardized();
    let mut progress = [Progress {
        shape: init.clone(),
        fc1: None,
    }];
    let mut out = Vec::with_capacity(model.stages.len());
    for t in 0..model.stages.len() {
        advance_batch(model, t, &[&std], &mut progress)?;
        out.push(progress[0].shape.clone());
    }
    Ok(out)
}

/// Batched [`dan_forward`]: per-stage shapes for each image.
pub(crate) fn dan_forward_batch(model: &DanModel, imgs: &[&GrayImage], inits: &[Shape]) -> Result<Vec<Vec<Shape>>> {
    if imgs.len() != inits.len() {
        return Err(Error::InvalidArgument("one initial shape per image".into()));
    }
    let stds: Vec<GrayImage> = imgs.iter().map(|i| i.standardized()).collect();
    let refs: Vec<&GrayImage> = stds.iter().collect();
    let mut progress: Vec<Progress> = inits
        .iter()
        .map(|s| Progress {
            shape: s.clone(),
            fc1: None,
        })
        .collect();
    let mut out = vec![Vec::with_capacity(model.stages.len()); imgs.len()];
    for t in 0..model.stages.len() {
        advance_batch(model, t, &refs, &mut progress)?;
        for (o, p) in out.iter_mut().zip(&progress) {
            o.push(p.shape.clone());
        }
    }
    Ok(out)
}
