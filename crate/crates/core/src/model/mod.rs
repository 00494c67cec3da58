//! The multi-stage alignment network: per-stage parameters, the stage
//! graph, connection layers and the model container.

mod container;
mod forward;
mod stage;

use rand::Rng;

use crate::autodiff::{BatchNormState, Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{Shape, NUM_LANDMARKS};

pub use container::{load_model, read_model, save_model, write_model, MAGIC};
pub use forward::{connection_forward, dan_forward, Connection};
pub use forward::feature_image;
pub(crate) use forward::{advance_batch, connect_geometry, dan_forward_batch, Progress};
pub use stage::{build_stage, planes_tensor, register_params, stage_forward, FeatureInput, StageGraph, StageOutput};

pub const FRAME: usize = 112;
pub const HEATMAP_RADIUS: f64 = 16.0;
pub const CONV_NAMES: [&str; 8] = ["conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b", "conv4a", "conv4b"];

/// Layer widths of one stage. The frame is fixed at 112 pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageArch {
    /// Output channels of conv blocks 1-4 (two convolutions per block).
    pub widths: [usize; 4],
    /// Units of the first fully connected layer.
    pub fc1: usize,
}

impl Default for StageArch {
    fn default() -> Self {
        StageArch::full()
    }
}

impl StageArch {
    /// The VGG-style widths 64-128-256-512 with a 256-unit fc1.
    pub fn full() -> Self {
        StageArch {
            widths: [64, 128, 256, 512],
            fc1: 256,
        }
    }

    /// Channel widths divided by `divisor` (at least one channel each).
    pub fn reduced(divisor: usize) -> Self {
        let full = StageArch::full();
        StageArch {
            widths: full.widths.map(|w| (w / divisor.max(1)).max(1)),
            fc1: full.fc1,
        }
    }

    pub fn frame(&self) -> usize {
        FRAME
    }

    pub fn feature_side(&self) -> usize {
        FRAME / 2
    }

    /// Flattened length after the last pooling layer.
    pub fn flat_len(&self) -> usize {
        let side = FRAME / 16;
        side * side * self.widths[3]
    }

    /// Input depth of conv1a: the image alone for the first stage, image +
    /// heatmap + feature image afterwards.
    pub fn input_channels(stage_index: usize) -> usize {
        if stage_index == 0 {
            1
        } else {
            3
        }
    }

    /// Per-layer extents as (height, width, depth), in network order.
    pub fn layer_rows(&self, input_channels: usize) -> Vec<LayerRow> {
        let mut rows = Vec::with_capacity(14);
        let mut side = FRAME;
        let mut depth = input_channels;
        for (block, &width) in self.widths.iter().enumerate() {
            for half in 0..2 {
                rows.push(LayerRow {
                    name: CONV_NAMES[2 * block + half],
                    shape_in: [side, side, depth],
                    shape_out: [side, side, width],
                    kernel: Some(KernelSpec {
                        height: 3,
                        width: 3,
                        depth,
                        stride: 1,
                    }),
                });
                depth = width;
            }
            rows.push(LayerRow {
                name: ["pool1", "pool2", "pool3", "pool4"][block],
                shape_in: [side, side, depth],
                shape_out: [side / 2, side / 2, depth],
                kernel: Some(KernelSpec {
                    height: 2,
                    width: 2,
                    depth: 1,
                    stride: 2,
                }),
            });
            side /= 2;
        }
        rows.push(LayerRow {
            name: "fc1",
            shape_in: [side, side, depth],
            shape_out: [1, 1, self.fc1],
            kernel: None,
        });
        rows.push(LayerRow {
            name: "fc2",
            shape_in: [1, 1, self.fc1],
            shape_out: [1, 1, 2 * NUM_LANDMARKS],
            kernel: None,
        });
        rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelSpec {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub name: &'static str,
    pub shape_in: [usize; 3],
    pub shape_out: [usize; 3],
    pub kernel: Option<KernelSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, 3, 3]`.
    pub kernel: Tensor<f32>,
    pub bn: BatchNormState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBnLayer {
    /// `[out, in]`.
    pub weight: Tensor<f32>,
    pub bn: BatchNormState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`.
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

/// Parameters of one stage. `feature` maps the previous stage's fc1
/// activations to this stage's 56x56 feature image and is absent on the
/// first stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub arch: StageArch,
    pub convs: Vec<ConvLayer>,
    pub fc1: DenseBnLayer,
    pub fc2: DenseLayer,
    pub feature: Option<DenseLayer>,
}

fn he_uniform(data: &mut [f32], fan_in: usize, rng: &mut impl Rng) {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    for v in data {
        *v = rng.random_range(-bound..bound);
    }
}

impl StageParams {
    /// All weights zero, batch-norm layers at their identity state.
    pub fn zeroed(arch: StageArch, stage_index: usize) -> Self {
        let mut convs = Vec::with_capacity(8);
        let mut depth = StageArch::input_channels(stage_index);
        for &width in &arch.widths {
            for _ in 0..2 {
                convs.push(ConvLayer {
                    kernel: Tensor::zeros(&[width, depth, 3, 3]),
                    bn: BatchNormState::new(width),
                });
                depth = width;
            }
        }
        let side = arch.feature_side();
        StageParams {
            arch,
            convs,
            fc1: DenseBnLayer {
                weight: Tensor::zeros(&[arch.fc1, arch.flat_len()]),
                bn: BatchNormState::new(arch.fc1),
            },
            fc2: DenseLayer {
                weight: Tensor::zeros(&[2 * NUM_LANDMARKS, arch.fc1]),
                bias: Tensor::zeros(&[2 * NUM_LANDMARKS]),
            },
            feature: (stage_index > 0).then(|| DenseLayer {
                weight: Tensor::zeros(&[side * side, arch.fc1]),
                bias: Tensor::zeros(&[side * side]),
            }),
        }
    }

    /// He-uniform weights, unit batch-norm scale, zero biases and a zero
    /// fc2, so an untrained stage predicts no update.
    pub fn init(arch: StageArch, stage_index: usize, rng: &mut impl Rng) -> Self {
        let mut stage = StageParams::zeroed(arch, stage_index);
        for c in &mut stage.convs {
            let fan_in = c.kernel.len() / c.kernel.shape()[0];
            he_uniform(c.kernel.data_mut(), fan_in, rng);
        }
        he_uniform(stage.fc1.weight.data_mut(), arch.flat_len(), rng);
        if let Some(f) = &mut stage.feature {
            he_uniform(f.weight.data_mut(), arch.fc1, rng);
        }
        stage
    }

    pub fn input_channels(&self) -> usize {
        self.convs[0].kernel.shape()[1]
    }

    /// Trainable tensors in registration order: per conv (kernel, scale,
    /// shift), fc1 (weight, scale, shift), fc2 (weight, bias), feature
    /// (weight, bias).
    pub fn trainable_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.kernel.data_mut());
            out.push(&mut c.bn.scale);
            out.push(&mut c.bn.shift);
        }
        out.push(self.fc1.weight.data_mut());
        out.push(&mut self.fc1.bn.scale);
        out.push(&mut self.fc1.bn.shift);
        out.push(self.fc2.weight.data_mut());
        out.push(self.fc2.bias.data_mut());
        if let Some(f) = &mut self.feature {
            out.push(f.weight.data_mut());
            out.push(f.bias.data_mut());
        }
        out
    }

    /// Trainable tensors, in [`StageParams::trainable_mut`] order, converted
    /// to `T`.
    pub fn trainable_tensors<T: Real>(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        let conv = |t: &Tensor<f32>| t.cast::<T>();
        let vec = |v: &[f32]| Tensor::new(&[v.len()], v.iter().map(|&x| T::from_f32(x)).collect()).unwrap();
        for c in &self.convs {
            out.extend([conv(&c.kernel), vec(&c.bn.scale), vec(&c.bn.shift)]);
        }
        out.extend([conv(&self.fc1.weight), vec(&self.fc1.bn.scale), vec(&self.fc1.bn.shift)]);
        out.extend([conv(&self.fc2.weight), conv(&self.fc2.bias)]);
        if let Some(f) = &self.feature {
            out.extend([conv(&f.weight), conv(&f.bias)]);
        }
        out
    }

    pub fn trainable_shapes(&self) -> Vec<Vec<usize>> {
        self.trainable_tensors::<f32>().iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Every stored array with its name and extents, in container order.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (name, c) in CONV_NAMES.iter().zip(&self.convs) {
            out.push((format!("{name}.kernel"), c.kernel.shape().to_vec(), c.kernel.data()));
            push_bn(&mut out, name, &c.bn);
        }
        out.push(("fc1.weight".into(), self.fc1.weight.shape().to_vec(), self.fc1.weight.data()));
        push_bn(&mut out, "fc1", &self.fc1.bn);
        out.push(("fc2.weight".into(), self.fc2.weight.shape().to_vec(), self.fc2.weight.data()));
        out.push(("fc2.bias".into(), self.fc2.bias.shape().to_vec(), self.fc2.bias.data()));
        if let Some(f) = &self.feature {
            out.push(("feature.weight".into(), f.weight.shape().to_vec(), f.weight.data()));
            out.push(("feature.bias".into(), f.bias.shape().to_vec(), f.bias.data()));
        }
        out
    }

    pub(crate) fn arrays_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.kernel.data_mut());
            push_bn_mut(&mut out, &mut c.bn);
        }
        out.push(self.fc1.weight.data_mut());
        push_bn_mut(&mut out, &mut self.fc1.bn);
        out.push(self.fc2.weight.data_mut());
        out.push(self.fc2.bias.data_mut());
        if let Some(f) = &mut self.feature {
            out.push(f.weight.data_mut());
            out.push(f.bias.data_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_arrays().iter().map(|(_, _, d)| d.len()).sum()
    }
}

fn push_bn<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f32])>, name: &str, bn: &'a BatchNormState) {
    let n = vec![bn.channels()];
    out.push((format!("{name}.bn.scale"), n.clone(), &bn.scale));
    out.push((format!("{name}.bn.shift"), n.clone(), &bn.shift));
    out.push((format!("{name}.bn.mean"), n.clone(), &bn.running_mean));
    out.push((format!("{name}.bn.var"), n, &bn.running_var));
}

fn push_bn_mut<'a>(out: &mut Vec<&'a mut [f32]>, bn: &'a mut BatchNormState) {
    out.push(&mut bn.scale);
    out.push(&mut bn.shift);
    out.push(&mut bn.running_mean);
    out.push(&mut bn.running_var);
}

/// Canonical shape plus an ordered list of stages.
#[derive(Clone, Debug, PartialEq)]
pub struct DanModel {
    pub canonical: Shape,
    pub stages: Vec<StageParams>,
    pub radius: f64,
}

impl DanModel {
    /// A model with `n_stages` freshly initialized stages.
    pub fn new(canonical: Shape, arch: StageArch, n_stages: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_stages == 0 {
            return Err(Error::InvalidArgument("a model needs at least one stage".into()));
        }
        Ok(DanModel {
            canonical,
            stages: (0..n_stages).map(|i| StageParams::init(arch, i, rng)).collect(),
            radius: HEATMAP_RADIUS,
        })
    }

    pub fn arch(&self) -> StageArch {
        self.stages[0].arch
    }

    pub fn frame(&self) -> usize {
        FRAME
    }

    /// First `n` stages as a separate model.
    pub fn truncated(&self, n: usize) -> Result<DanModel> {
        if n == 0 || n > self.stages.len() {
            return Err(Error::InvalidArgument(format!("cannot keep {n} of {} stages", self.stages.len())));
        }
        Ok(DanModel {
            canonical: self.canonical.clone(),
            stages: self.stages[..n].to_vec(),
            radius: self.radius,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one stage".into()));
        }
        let arch = self.arch();
        for (i, s) in self.stages.iter().enumerate() {
            if s.arch != arch {
                return Err(Error::InvalidArgument("all stages must share one architecture".into()));
            }
            if s.input_channels() != StageArch::input_channels(i) || s.feature.is_some() != (i > 0) {
                return Err(Error::InvalidArgument(format!("stage {i} has the wrong input layout")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
