//! Adam with bias correction, global-norm gradient clipping, and the
//! reduce-on-plateau learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// No gradient was produced for a trainable parameter.
    MissingGrad { name: String },
    ShapeMismatch { name: String, msg: String },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::MissingGrad { name } => {
                write!(f, "no gradient for trainable parameter {name:?}")
            }
            OptimError::ShapeMismatch { name, msg } => write!(f, "parameter {name:?}: {msg}"),
        }
    }
}

impl core::error::Error for OptimError {}

/// Per-parameter first/second moment state, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the step counter. Call exactly once before the per-parameter
    /// updates of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Bias-corrected Adam update of a single parameter in place.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor<f32>,
        grad: &Tensor<f32>,
        lr: f64,
    ) -> Result<(), OptimError> {
        if grad.shape() != param.shape() {
            return Err(OptimError::ShapeMismatch {
                name: name.into(),
                msg: format!(
                    "gradient shape {:?} vs parameter shape {:?}",
                    grad.shape(),
                    param.shape()
                ),
            });
        }
        let m = self
            .m
            .entry(name.into())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let v = self
            .v
            .entry(name.into())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let c1 = (1.0 / (1.0 - self.beta1.powi(self.t as i32))) as f32;
        let c2 = (1.0 / (1.0 - self.beta2.powi(self.t as i32))) as f32;
        let lr = lr as f32;
        let eps = self.eps as f32;
        for i in 0..param.len() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * g;
            let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi * c1;
            let vhat = vi * c2;
            param.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    /// Moment tensors in name order, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor<f32>, &Tensor<f32>)> {
        self.m
            .iter()
            .map(move |(k, m)| (k, m, self.v.get(k).expect("paired moment")))
    }

    pub fn insert_moments(&mut self, name: String, m: Tensor<f32>, v: Tensor<f32>) {
        self.m.insert(name.clone(), m);
        self.v.insert(name, v);
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let mut sum_sq = 0.0f64;
    for g in grads.values() {
        for &x in g.data() {
            sum_sq += (x as f64) * (x as f64);
        }
    }
    let norm = sum_sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Reduce-on-plateau policy: multiply the learning rate by `factor` after
/// every run of `patience` consecutive epochs without a strict improvement
/// of the best seen validation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub base_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

/// Current learning rate as a pure function of the validation-loss history
/// (ordered by epoch). The stagnation streak resets both on improvement and
/// after each decay.
pub fn plateau_lr(history: &[f64], cfg: &PlateauConfig) -> f64 {
    let mut best = f64::infinity();
    let mut streak = 0usize;
    let mut decays = 0u32;
    for &loss in history {
        if loss < best {
            best = loss;
            streak = 0;
        } else {
            streak += 1;
            if streak >= cfg.patience {
                decays += 1;
                streak = 0;
            }
        }
    }
    (cfg.base_lr * cfg.factor.powi(decays as i32)).max(cfg.min_lr)
}

/// Convenience wrapper naming the parameter when a gradient is missing.
pub fn require_grad<'a>(
    grads: &'a BTreeMap<String, Tensor<f32>>,
    name: &str,
) -> Result<&'a Tensor<f32>, OptimError> {
    grads.get(name).ok_or_else(|| OptimError::MissingGrad {
        name: name.into(),
    })
}

/// Sum per-sample gradient maps in sample order (deterministic regardless of
/// which worker produced each map) and scale by `1/n`.
pub fn average_grads(per_sample: Vec<BTreeMap<String, Tensor<f32>>>) -> BTreeMap<String, Tensor<f32>> {
    let n = per_sample.len();
    let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for sample in per_sample {
        for (name, grad) in sample {
            match acc.get_mut(&name) {
                Some(total) => {
                    for (t, g) in total.data_mut().iter_mut().zip(grad.data()) {
                        *t += g;
                    }
                }
                None => {
                    acc.insert(name, grad);
                }
            }
        }
    }
    if n > 1 {
        let inv = 1.0 / n as f32;
        for g in acc.values_mut() {
            for x in g.data_mut() {
                *x *= inv;
            }
        }
    }
    acc
}
