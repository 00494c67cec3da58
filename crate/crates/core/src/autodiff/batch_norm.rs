use super::graph::{BnMode, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.9;

/// Learned scale/shift and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
    /// Weight of the old running value in each update.
    pub momentum: f32,
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Folds batch statistics into the running estimates. The running
    /// variance uses the unbiased batch estimate.
    pub fn update_running(&mut self, stats: &BatchStats) -> Result<()> {
        if stats.mean.len() != self.channels() || stats.var.len() != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                format!("{} channels vs stats for {}", self.channels(), stats.mean.len()),
            ));
        }
        let m = self.momentum as f64;
        let bessel = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels() {
            let rm = self.running_mean[c] as f64;
            let rv = self.running_var[c] as f64;
            self.running_mean[c] = (m * rm + (1.0 - m) * stats.mean[c]) as f32;
            self.running_var[c] = (m * rv + (1.0 - m) * stats.var[c] * bessel).max(0.0) as f32;
        }
        Ok(())
    }

    /// Registers scale and shift as trainable leaves.
    pub fn register<T: Real>(&self, g: &mut Graph<T>) -> (Var, Var) {
        let n = self.channels();
        let scale = g.param(Tensor::new(&[n], self.scale.iter().map(|&v| T::from_f32(v)).collect()).unwrap());
        let shift = g.param(Tensor::new(&[n], self.shift.iter().map(|&v| T::from_f32(v)).collect()).unwrap());
        (scale, shift)
    }

    /// Training-mode normalization; running statistics are updated.
    pub fn apply_train<T: Real>(&mut self, g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let y = g.batch_norm(x, scale, shift, BnMode::Train { epsilon: self.epsilon as f64 })?;
        let stats = g.batch_stats(y).expect("train-mode batch norm records statistics").clone();
        self.update_running(&stats)?;
        Ok(y)
    }

    /// Inference-mode normalization with the running statistics.
    pub fn apply_infer<T: Real>(&self, g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
        g.batch_norm(x, scale, shift, self.infer_mode())
    }

    pub fn infer_mode(&self) -> BnMode<'_> {
        BnMode::Infer {
            mean: &self.running_mean,
            var: &self.running_var,
            epsilon: self.epsilon as f64,
        }
    }
}
