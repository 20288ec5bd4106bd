//! Adamax, gradient clipping and the step-halving learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `base * 0.5^floor((epoch - 1) / period)` for 1-indexed epochs.
pub fn learning_rate(base: f64, period: usize, epoch: usize) -> f64 {
    assert!(epoch >= 1 && period >= 1, "epochs and period are 1-based");
    let halvings = (epoch - 1) / period;
    base * 0.5f64.powi(halvings as i32)
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

/// Per-parameter first moment `m` and infinity norm `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adamax {
    pub step: u64,
    pub m: Vec<Option<Tensor>>,
    pub u: Vec<Option<Tensor>>,
}

impl Adamax {
    /// Zero state for every trainable parameter of `params`.
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || -> Vec<Option<Tensor>> {
            params
                .entries()
                .iter()
                .map(|e| e.trainable.then(|| Tensor::zeros(e.value.shape())))
                .collect()
        };
        Adamax {
            step: 0,
            m: zeros(),
            u: zeros(),
        }
    }

    /// One update with `lr`. Every gradient is checked for finiteness before
    /// any parameter changes.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        for (id, grad) in params.ids().zip(grads) {
            if let Some(gt) = grad {
                if let Some(pos) = gt.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        param: params.entry(id).name.clone(),
                        detail: format!("entry {pos} is {}", gt.data()[pos]),
                    });
                }
            }
        }
        self.step += 1;
        let step_size = lr / (1.0 - BETA1.powi(self.step as i32));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let k = id.index();
            let (Some(grad), Some(m), Some(u)) = (&grads[k], &mut self.m[k], &mut self.u[k]) else {
                continue;
            };
            let theta = params.get_mut(id).data_mut();
            for (((w, &gv), mv), uv) in theta.iter_mut().zip(grad.data()).zip(m.data_mut()).zip(u.data_mut()) {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *uv = (BETA2 * *uv).max(gv.abs());
                *w -= step_size * *mv / (*uv + EPSILON);
            }
        }
        Ok(())
    }
}
