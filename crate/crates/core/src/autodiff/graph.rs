use rand::Rng;

use super::batch_norm::BatchStats;
use super::tensor::{matmul, Real, Tensor};
use crate::error::{Error, Result};
use crate::interp::corner_aligned_taps;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// How a batch-norm node obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train { epsilon: f64 },
    Infer { mean: &'a [f32], var: &'a [f32], epsilon: f64 },
}

/// Per-sample target of [`Graph::mean_point_distance`]: predictions are
/// `offsets` (from the graph) added to `base`, mapped through the similarity
/// `[[a, -b], [b, a]]·p + t`, and compared with `target`.
#[derive(Clone, Debug)]
pub struct PointTarget {
    /// Interleaved `x0, y0, x1, y1, ...`.
    pub base: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
    pub target: Vec<f64>,
    /// Multiplies the per-sample mean distance (e.g. `1 / d_ipd`).
    pub weight: f64,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    Dense { input: Var, weight: Var, bias: Option<Var> },
    Relu { input: Var, mask: Vec<bool> },
    BatchNorm { input: Var, scale: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<f64>, stats: Option<BatchStats> },
    Dropout { input: Var, mask: Option<Vec<T>> },
    Reshape { input: Var },
    ConcatChannels { inputs: Vec<Var> },
    Upscale2x { input: Var },
    Sum { input: Var },
    WeightedSum { input: Var, weights: Vec<T> },
    MeanPointDistance { input: Var, targets: Vec<PointTarget> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape. Nodes are appended in evaluation
/// order, so the node list is already topologically sorted.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    frozen: Option<Frozen>,
}

/// Every piecewise choice made on a tape, in evaluation order: the active
/// set of each ReLU and the winning element of each pooling window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Branches {
    pub relu: Vec<Vec<bool>>,
    pub pool: Vec<Vec<u32>>,
}

struct Frozen {
    plan: Branches,
    relu_used: usize,
    pool_used: usize,
    overridden: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected NCHW tensor, got {t:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            frozen: None,
        }
    }

    /// A graph whose ReLUs and pools replay the choices in `plan` instead of
    /// deciding from their inputs. The result is the smooth extension of the
    /// piece `plan` was recorded on. Panics if the tape diverges from `plan`.
    pub fn with_branches(plan: Branches) -> Self {
        Graph {
            nodes: Vec::new(),
            frozen: Some(Frozen {
                plan,
                relu_used: 0,
                pool_used: 0,
                overridden: 0,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            grad: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            grad: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn branches(&self) -> Branches {
        let mut out = Branches::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { mask, .. } => out.relu.push(mask.clone()),
                Op::MaxPool2d { argmax, .. } => out.pool.push(argmax.clone()),
                _ => {}
            }
        }
        out
    }

    /// Number of replayed choices that differ from what the inputs would
    /// have decided. Always 0 for graphs built with [`Graph::new`].
    pub fn overridden_branches(&self) -> usize {
        self.frozen.as_ref().map_or(0, |f| f.overridden)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Statistics recorded by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// 2-D cross-correlation of an NCHW input with an OCKhKw kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("conv2d", self.value(input).shape())?;
        let (o, kc, kh, kw) = dims4("conv2d", self.value(kernel).shape())?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let geo = ConvGeometry::new(c, h, w, kh, kw, stride, pad);
        let ck = c * kh * kw;
        let p = geo.ho * geo.wo;
        let mut out = vec![T::ZERO; n * o * p];
        let mut cols = vec![T::ZERO; ck * p];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        for s in 0..n {
            geo.im2col(&x[s * c * h * w..(s + 1) * c * h * w], &mut cols);
            matmul(o, ck, p, k, false, &cols, false, T::ZERO, &mut out[s * o * p..(s + 1) * o * p]);
        }
        let value = Tensor::new(&[n, o, geo.ho, geo.wo], out)?;
        Ok(self.push(Op::Conv2d { input, kernel, stride, pad }, value, &[input, kernel]))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("max_pool2d", self.value(input).shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2d", format!("spatial extents {h}x{w} must be even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.nodes[input.0].value.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let replay = self.frozen.as_mut().map(|f| {
            let plan = f.plan.pool.get(f.pool_used).expect("frozen plan has too few pooling layers");
            assert_eq!(plan.len(), n * c * ho * wo, "frozen pooling plan does not match the tape");
            f.pool_used += 1;
            (plan, &mut f.overridden)
        });
        let (plan, overridden) = match replay {
            Some((p, o)) => (Some(p), Some(o)),
            None => (None, None),
        };
        let mut changed = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let mut best = i0;
                    for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    if let Some(p) = plan {
                        let chosen = p[argmax.len()] as usize;
                        changed += (chosen != best) as usize;
                        best = chosen;
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        if let Some(o) = overridden {
            *o += changed;
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(Op::MaxPool2d { input, argmax }, value, &[input]))
    }

    /// Affine map `x·Wᵀ + b` over the flattened trailing extents of `input`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(input).shape();
        let n = xs[0];
        let fan_in: usize = xs[1..].iter().product();
        let (out_dim, w_in) = match *self.value(weight).shape() {
            [o, i] => (o, i),
            ref s => return Err(Error::shape("dense", format!("weight must be 2-D, got {s:?}"))),
        };
        if w_in != fan_in {
            return Err(Error::shape(
                "dense",
                format!("weight expects {w_in} inputs, tensor provides {fan_in}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).len() != out_dim {
                return Err(Error::shape("dense", format!("bias length {} != {out_dim}", self.value(b).len())));
            }
        }
        let mut out = vec![T::ZERO; n * out_dim];
        matmul(
            n,
            fan_in,
            out_dim,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            T::ZERO,
            &mut out,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(&[n, out_dim], out)?;
        let inputs: Vec<Var> = [Some(input), Some(weight), bias].into_iter().flatten().collect();
        Ok(self.push(Op::Dense { input, weight, bias }, value, &inputs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let mut mask: Vec<bool> = x.data().iter().map(|&v| v > T::ZERO).collect();
        if let Some(f) = self.frozen.as_mut() {
            let plan = f.plan.relu.get(f.relu_used).expect("frozen plan has too few ReLUs");
            assert_eq!(plan.len(), mask.len(), "frozen ReLU plan does not match the tape");
            f.relu_used += 1;
            f.overridden += mask.iter().zip(plan).filter(|(a, b)| a != b).count();
            mask.copy_from_slice(plan);
        }
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::ZERO }).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape as input");
        self.push(Op::Relu { input, mask }, value, &[input])
    }

    /// Per-channel normalization of an `[N, C]` or `[N, C, H, W]` tensor
    /// followed by `scale * x̂ + shift`.
    pub fn batch_norm(&mut self, input: Var, scale: Var, shift: Var, mode: BnMode<'_>) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expected 2-D or 4-D input, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels but scale/shift sized differently")));
        }
        let count = n * spatial;
        let x = self.value(input).data();
        let (mean, var, eps, train) = match mode {
            BnMode::Train { epsilon } => {
                if n < 2 {
                    return Err(Error::InvalidArgument("batch_norm in train mode needs batch size >= 2".into()));
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for s in 0..n {
                        let off = (s * c + ch) * spatial;
                        acc += x[off..off + spatial].iter().map(|v| v.to_f64()).sum::<f64>();
                    }
                    let mu = acc / count as f64;
                    let mut sq = 0.0;
                    for s in 0..n {
                        let off = (s * c + ch) * spatial;
                        sq += x[off..off + spatial]
                            .iter()
                            .map(|v| {
                                let d = v.to_f64() - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count as f64;
                }
                (mean, var, epsilon, true)
            }
            BnMode::Infer { mean, var, epsilon } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics sized differently from channels"));
                }
                (
                    mean.iter().map(|&v| v as f64).collect(),
                    var.iter().map(|&v| v as f64).collect(),
                    epsilon,
                    false,
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![T::ZERO; x.len()];
        let mut out = vec![T::ZERO; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * spatial;
                let (mu, is) = (mean[ch], inv_std[ch]);
                let (gm, bt) = (gamma[ch], beta[ch]);
                for i in off..off + spatial {
                    let xh = T::from_f64((x[i].to_f64() - mu) * is);
                    xhat[i] = xh;
                    out[i] = gm * xh + bt;
                }
            }
        }
        let stats = train.then_some(BatchStats { mean, var, count });
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                stats,
            },
            value,
            &[input, scale, shift],
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1]")));
        }
        let x = self.value(input);
        if mode == Mode::Infer || rate == 0.0 {
            let value = x.clone();
            return Ok(self.push(Op::Dropout { input, mask: None }, value, &[input]));
        }
        let keep_scale = if rate >= 1.0 { T::ZERO } else { T::from_f64(1.0 / (1.0 - rate)) };
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { T::ZERO } else { keep_scale })
            .collect();
        let data: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(Op::Dropout { input, mask: Some(mask) }, value, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape { input }, value, &[input]))
    }

    /// Stacks NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (n, _, h, w) = dims4("concat_channels", self.value(*first).shape())?;
        let mut total_c = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = dims4("concat_channels", self.value(v).shape())?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("cannot stack {:?} with {:?}", self.value(v).shape(), self.value(*first).shape()),
                ));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let vc = t.shape()[1];
                out.extend_from_slice(&t.data()[s * vc * plane..(s + 1) * vc * plane]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        Ok(self.push(Op::ConcatChannels { inputs: inputs.to_vec() }, value, inputs))
    }

    /// Corner-aligned bilinear magnification by 2 of an NCHW tensor.
    pub fn upscale2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("upscale2x", self.value(input).shape())?;
        let (ho, wo) = (2 * h, 2 * w);
        let ty = corner_aligned_taps(h, ho);
        let tx = corner_aligned_taps(w, wo);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                let fy = T::from_f64(fy);
                for &(x0, x1, fx) in &tx {
                    let fx = T::from_f64(fx);
                    let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
                    let bot = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
                    out.push(top + fy * (bot - top));
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(Op::Upscale2x { input }, value, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: T = self.value(input).data().iter().copied().sum();
        self.push(Op::Sum { input }, Tensor::scalar(total), &[input])
    }

    /// `Σ xᵢ·wᵢ` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.len() != self.value(input).len() {
            return Err(Error::shape("weighted_sum", "weights sized differently from input"));
        }
        let total: T = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(
            Op::WeightedSum {
                input,
                weights: weights.data().to_vec(),
            },
            Tensor::scalar(total),
            &[input],
        ))
    }

    /// Batch mean of per-sample weighted mean point distances. `input` is
    /// `[N, 2L]` holding interleaved point offsets.
    pub fn mean_point_distance(&mut self, input: Var, targets: Vec<PointTarget>) -> Result<Var> {
        let shape = self.value(input).shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "mean_point_distance",
                format!("input {shape:?} vs {} targets", targets.len()),
            ));
        }
        let dim = shape[1];
        if !dim.is_multiple_of(2) || targets.iter().any(|t| t.base.len() != dim || t.target.len() != dim) {
            return Err(Error::shape("mean_point_distance", "targets must match the offset dimension"));
        }
        let x = self.value(input).data();
        let points = dim / 2;
        let mut total = 0.0;
        for (s, t) in targets.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..points {
                let (ex, ey) = point_residual(t, x, s * dim, i);
                acc += (ex * ex + ey * ey).sqrt();
            }
            total += acc / points as f64 * t.weight;
        }
        let loss = total / targets.len() as f64;
        Ok(self.push(
            Op::MeanPointDistance { input, targets },
            Tensor::scalar(T::from_f64(loss)),
            &[input],
        ))
    }

    /// Reverse sweep from a scalar node. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, T::ONE));
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = node.grad.as_ref() else { continue };
            backward_node(&node.op, &node.value, gy, before)?;
        }
        Ok(())
    }
}

#[inline]
fn point_residual<T: Real>(t: &PointTarget, x: &[T], row: usize, i: usize) -> (f64, f64) {
    let px = t.base[2 * i] + x[row + 2 * i].to_f64();
    let py = t.base[2 * i + 1] + x[row + 2 * i + 1].to_f64();
    let qx = t.a * px - t.b * py + t.tx;
    let qy = t.b * px + t.a * py + t.ty;
    (qx - t.target[2 * i], qy - t.target[2 * i + 1])
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvGeometry { c, h, w, kh, kw, stride, pad, ho, wo }
    }

    /// Output columns `ox` for which `ox*stride + kx - pad` lands inside the row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        // ox*stride + kx - pad <= w - 1
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::ZERO);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..(ci * self.h + iy as usize + 1) * self.w];
                        dst[..lo].fill(T::ZERO);
                        dst[hi..].fill(T::ZERO);
                        if self.stride == 1 {
                            let start = lo + kx - self.pad;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in lo..hi {
                            dx[base + ox * self.stride + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn take_grad<T: Real>(nodes: &mut [Node<T>], v: Var) -> Vec<T> {
    let node = &mut nodes[v.0];
    match node.grad.take() {
        Some(g) => g.into_data(),
        None => vec![T::ZERO; node.value.len()],
    }
}

fn put_grad<T: Real>(nodes: &mut [Node<T>], v: Var, data: Vec<T>) {
    let shape = nodes[v.0].value.shape().to_vec();
    nodes[v.0].grad = Some(Tensor::new(&shape, data).expect("gradient shaped like value"));
}

fn wants(nodes: &[Node<impl Real>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_node<T: Real>(op: &Op<T>, value: &Tensor<T>, gy: &Tensor<T>, nodes: &mut [Node<T>]) -> Result<()> {
    let dy = gy.data();
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        } => {
            let (n, c, h, w) = dims4("conv2d", nodes[input.0].value.shape())?;
            let (o, _, kh, kw) = dims4("conv2d", nodes[kernel.0].value.shape())?;
            let geo = ConvGeometry::new(c, h, w, kh, kw, *stride, *pad);
            let ck = c * kh * kw;
            let p = geo.ho * geo.wo;
            let need_k = wants(nodes, *kernel);
            let need_x = wants(nodes, *input);
            let mut cols = vec![T::ZERO; ck * p];
            if need_k {
                let mut dk = take_grad(nodes, *kernel);
                let x = nodes[input.0].value.data();
                for s in 0..n {
                    geo.im2col(&x[s * c * h * w..(s + 1) * c * h * w], &mut cols);
                    matmul(o, p, ck, &dy[s * o * p..(s + 1) * o * p], false, &cols, true, T::ONE, &mut dk);
                }
                put_grad(nodes, *kernel, dk);
            }
            if need_x {
                let mut dx = take_grad(nodes, *input);
                let k = nodes[kernel.0].value.data();
                for s in 0..n {
                    matmul(ck, o, p, k, true, &dy[s * o * p..(s + 1) * o * p], false, T::ZERO, &mut cols);
                    geo.col2im_add(&cols, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
                }
                put_grad(nodes, *input, dx);
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if wants(nodes, *input) {
                let mut dx = take_grad(nodes, *input);
                for (&idx, &g) in argmax.iter().zip(dy) {
                    dx[idx as usize] += g;
                }
                put_grad(nodes, *input, dx);
            }
        }
        Op::Dense { input, weight, bias } => {
            let n = nodes[input.0].value.shape()[0];
            let (out_dim, fan_in) = {
                let s = nodes[weight.0].value.shape();
                (s[0], s[1])
            };
            if wants(nodes, *input) {
                let mut dx = take_grad(nodes, *input);
                matmul(n, out_dim, fan_in, dy, false, nodes[weight.0].value.data(), false, T::ONE, &mut dx);
                put_grad(nodes, *input, dx);
            }
            if wants(nodes, *weight) {
                let mut dw = take_grad(nodes, *weight);
                matmul(out_dim, n, fan_in, dy, true, nodes[input.0].value.data(), false, T::ONE, &mut dw);
                put_grad(nodes, *weight, dw);
            }
            if let Some(b) = bias {
                if wants(nodes, *b) {
                    let mut db = take_grad(nodes, *b);
                    for row in dy.chunks(out_dim) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    put_grad(nodes, *b, db);
                }
            }
        }
        Op::Relu { input, mask } => {
            if wants(nodes, *input) {
                let mut dx = take_grad(nodes, *input);
                for ((d, &g), &m) in dx.iter_mut().zip(dy).zip(mask) {
                    if m {
                        *d += g;
                    }
                }
                put_grad(nodes, *input, dx);
            }
        }
        Op::BatchNorm {
            input,
            scale,
            shift,
            xhat,
            inv_std,
            stats,
        } => {
            let shape = value.shape();
            let (n, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let m = (n * spatial) as f64;
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dy_xhat = vec![0.0f64; c];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * spatial;
                    for i in off..off + spatial {
                        let g = dy[i].to_f64();
                        sum_dy[ch] += g;
                        sum_dy_xhat[ch] += g * xhat[i].to_f64();
                    }
                }
            }
            if wants(nodes, *scale) {
                let mut d = take_grad(nodes, *scale);
                for (dv, &sv) in d.iter_mut().zip(&sum_dy_xhat) {
                    *dv += T::from_f64(sv);
                }
                put_grad(nodes, *scale, d);
            }
            if wants(nodes, *shift) {
                let mut d = take_grad(nodes, *shift);
                for (dv, &sv) in d.iter_mut().zip(&sum_dy) {
                    *dv += T::from_f64(sv);
                }
                put_grad(nodes, *shift, d);
            }
            if wants(nodes, *input) {
                let gamma: Vec<f64> = nodes[scale.0].value.data().iter().map(|v| v.to_f64()).collect();
                let mut dx = take_grad(nodes, *input);
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * spatial;
                        let gi = gamma[ch] * inv_std[ch];
                        if stats.is_some() {
                            let k = gi / m;
                            for i in off..off + spatial {
                                let v = k
                                    * (m * dy[i].to_f64() - sum_dy[ch] - xhat[i].to_f64() * sum_dy_xhat[ch]);
                                dx[i] += T::from_f64(v);
                            }
                        } else {
                            for i in off..off + spatial {
                                dx[i] += T::from_f64(gi * dy[i].to_f64());
                            }
                        }
                    }
                }
                put_grad(nodes, *input, dx);
            }
        }
        Op::Dropout { input, mask } => {
            if wants(nodes, *input) {
                let mut dx = take_grad(nodes, *input);
                match mask {
                    Some(mask) => {
                        for ((d, &g), &mk) in dx.iter_mut().zip(dy).zip(mask) {
                            *d += g * mk;
                        }
                    }
                    None => {
                        for (d, &g) in dx.iter_mut().zip(dy) {
                            *d += g;
                        }
                    }
                }
                put_grad(nodes, *input, dx);
            }
        }
        Op::Reshape { input } => {
            if wants(nodes, *input) {
                let mut dx = take_grad(nodes, *input);
                for (d, &g) in dx.iter_mut().zip(dy) {
                    *d += g;
                }
                put_grad(nodes, *input, dx);
            }
        }
        Op::ConcatChannels { inputs } => {
            let shape = value.shape();
            let (n, plane) = (shape[0], shape[2] * shape[3]);
            let total_c = shape[1];
            let mut c_off = 0;
            for &v in inputs {
                let vc = nodes[v.0].value.shape()[1];
                if wants(nodes, v) {
                    let mut dx = take_grad(nodes, v);
                    for s in 0..n {
                        let src = &dy[(s * total_c + c_off) * plane..(s * total_c + c_off + vc) * plane];
                        for (d, &g) in dx[s * vc * plane..(s + 1) * vc * plane].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                    put_grad(nodes, v, dx);
                }
                c_off += vc;
            }
        }
        Op::Upscale2x { input } => {
            if wants(nodes, *input) {
                let (n, c, h, w) = dims4("upscale2x", nodes[input.0].value.shape())?;
                let ty = corner_aligned_taps(h, 2 * h);
                let tx = corner_aligned_taps(w, 2 * w);
                let mut dx = take_grad(nodes, *input);
                let mut k = 0;
                for plane in 0..n * c {
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for &(y0, y1, fy) in &ty {
                        let fy = T::from_f64(fy);
                        for &(x0, x1, fx) in &tx {
                            let fx = T::from_f64(fx);
                            let g = dy[k];
                            k += 1;
                            let gt = g * (T::ONE - fy);
                            let gb = g * fy;
                            dst[y0 * w + x0] += gt * (T::ONE - fx);
                            dst[y0 * w + x1] += gt * fx;
                            dst[y1 * w + x0] += gb * (T::ONE - fx);
                            dst[y1 * w + x1] += gb * fx;
                        }
                    }
                }
                put_grad(nodes, *input, dx);
            }
        }
        Op::Sum { input } => {
            if wants(nodes, *input) {
                let g = dy[0];
                let mut dx = take_grad(nodes, *input);
                for d in dx.iter_mut() {
                    *d += g;
                }
                put_grad(nodes, *input, dx);
            }
        }
        Op::WeightedSum { input, weights } => {
            if wants(nodes, *input) {
                let g = dy[0];
                let mut dx = take_grad(nodes, *input);
                for (d, &wv) in dx.iter_mut().zip(weights) {
                    *d += g * wv;
                }
                put_grad(nodes, *input, dx);
            }
        }
        Op::MeanPointDistance { input, targets } => {
            if wants(nodes, *input) {
                let g = dy[0].to_f64();
                let dim = nodes[input.0].value.shape()[1];
                let points = dim / 2;
                let mut dx = take_grad(nodes, *input);
                {
                    let x = nodes[input.0].value.data();
                    let batch = targets.len() as f64;
                    for (s, t) in targets.iter().enumerate() {
                        let k = g * t.weight / (points as f64 * batch);
                        for i in 0..points {
                            let (ex, ey) = point_residual(t, x, s * dim, i);
                            let norm = (ex * ex + ey * ey).sqrt();
                            if norm == 0.0 {
                                continue;
                            }
                            let (ux, uy) = (ex / norm, ey / norm);
                            // Transpose of [[a, -b], [b, a]].
                            let gx = t.a * ux + t.b * uy;
                            let gy = -t.b * ux + t.a * uy;
                            dx[s * dim + 2 * i] += T::from_f64(k * gx);
                            dx[s * dim + 2 * i + 1] += T::from_f64(k * gy);
                        }
                    }
                }
                put_grad(nodes, *input, dx);
            }
        }
    }
    Ok(())
}
