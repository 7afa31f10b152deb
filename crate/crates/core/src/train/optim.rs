//! Poly learning-rate schedule and SGD with momentum and weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamKind, Tensor};

/// `base_lr · (1 − iter/max_iter)^power`; `base_lr` when `max_iter` is 0.
pub fn poly_lr(base_lr: f64, power: f64, iter: usize, max_iter: usize) -> f64 {
    if max_iter == 0 {
        return base_lr;
    }
    let t = (iter.min(max_iter)) as f64 / max_iter as f64;
    base_lr * (1.0 - t).powf(power)
}

/// In-place update of one parameter array:
/// `g' = g + wd·p`, `v ← momentum·v + g'`, `p ← p − lr·v`.
pub fn sgd_step(
    p: &mut [f64],
    g: &[f64],
    v: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Momentum SGD over named parameters. Weight decay applies to
/// [`ParamKind::Weight`] only; frozen parameters and buffers are skipped.
#[derive(Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<usize, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Applies one step. Every gradient is checked before anything is
    /// modified; a missing gradient counts as zero.
    pub fn step(&mut self, params: &[(String, Param)], lr: f64) -> Result<()> {
        for (name, p) in params {
            if let Some(g) = p.read().grad.as_ref() {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        for (_, p) in params {
            if !p.is_trainable() || p.is_frozen() {
                continue;
            }
            let mut data = p.write();
            let shape = data.value.shape();
            let grad = data.grad.take().unwrap_or_else(|| Tensor::zeros(shape));
            let wd = if data.kind == ParamKind::Weight {
                self.weight_decay
            } else {
                0.0
            };
            let v = self
                .velocity
                .entry(p.storage_id())
                .or_insert_with(|| Tensor::zeros(shape));
            sgd_step(
                data.value.data_mut(),
                grad.data(),
                v.data_mut(),
                lr,
                self.momentum,
                wd,
            );
            data.grad = Some(grad);
        }
        Ok(())
    }
}
