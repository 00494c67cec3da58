//! Central finite-difference verification of reverse-mode gradients.

use rand::Rng;

use super::graph::{Branches, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub probes: usize,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            probes: 20,
            tolerance: 1e-3,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Probes whose `x ± step` interval contains a kink that was replayed
    /// away. Always 0 for unfrozen objectives.
    pub crossed: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// One objective evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    /// One gradient per parameter, when requested.
    pub grads: Option<Vec<Tensor<f64>>>,
    /// Piecewise choices that were replayed against what the inputs would
    /// have decided (see [`Graph::with_branches`]).
    pub overridden: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `objective`'s gradients with central differences at randomly
/// chosen coordinates. Probes cycle through the parameter tensors so every
/// tensor is visited. The objective is called once with `need_grads` set and
/// then twice per probe without.
pub fn finite_difference_check<F, R>(
    params: &[Tensor<f64>],
    mut objective: F,
    config: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<Evaluation>,
    R: Rng + ?Sized,
{
    if params.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs at least one parameter".into()));
    }
    let base = objective(params, true)?;
    let grads = base
        .grads
        .ok_or_else(|| Error::InvalidArgument("objective returned no gradients".into()))?;
    if grads.len() != params.len() {
        return Err(Error::shape("finite_difference_check", "one gradient per parameter expected"));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut probes = Vec::with_capacity(config.probes);
    let mut crossed = 0;
    for k in 0..config.probes {
        let param = k % params.len();
        let index = rng.random_range(0..params[param].len());
        let orig = work[param].data()[index];
        work[param].data_mut()[index] = orig + config.step;
        let plus = objective(&work, false)?;
        work[param].data_mut()[index] = orig - config.step;
        let minus = objective(&work, false)?;
        work[param].data_mut()[index] = orig;
        crossed += (plus.overridden + minus.overridden > 0) as usize;
        let numeric = (plus.loss - minus.loss) / (2.0 * config.step);
        let analytic = grads[param].data()[index];
        probes.push(Probe {
            param,
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, config.floor),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < config.tolerance,
        probes,
        crossed,
        max_rel_error,
    })
}

/// Wraps a graph-building closure as a finite-difference objective. The
/// closure receives one trainable leaf per parameter and returns a scalar.
///
/// The gradient evaluation records the graph's [`Branches`]; later
/// evaluations replay them, so both ends of a central difference stay on the
/// smooth piece containing the base point even when `x ± step` would cross a
/// ReLU or pooling kink. Use [`graph_objective_unfrozen`] for plain
/// differences.
pub fn graph_objective<B>(build: B) -> impl FnMut(&[Tensor<f64>], bool) -> Result<Evaluation>
where
    B: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    objective(build, true)
}

/// Like [`graph_objective`] but every evaluation decides its own branches.
pub fn graph_objective_unfrozen<B>(build: B) -> impl FnMut(&[Tensor<f64>], bool) -> Result<Evaluation>
where
    B: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    objective(build, false)
}

fn objective<B>(mut build: B, freeze: bool) -> impl FnMut(&[Tensor<f64>], bool) -> Result<Evaluation>
where
    B: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut plan: Option<Branches> = None;
    move |params: &[Tensor<f64>], need_grads: bool| {
        let mut g = match (&plan, need_grads) {
            (Some(p), false) => Graph::with_branches(p.clone()),
            _ => Graph::new(),
        };
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let loss_value = g.value(loss).data()[0];
        let overridden = g.overridden_branches();
        if !need_grads {
            return Ok(Evaluation {
                loss: loss_value,
                grads: None,
                overridden,
            });
        }
        if freeze {
            plan = Some(g.branches());
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect();
        Ok(Evaluation {
            loss: loss_value,
            grads: Some(grads),
            overridden,
        })
    }
}
