use std::sync::Arc;

use parking_lot::RwLock;

use super::tape::{Backward, BackwardCtx};
use super::{Param, ParamKind, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Running statistics, never updated, and scale/shift are not trainable.
    Frozen,
}

/// Per-channel batch normalization. Clones share all storage, including the
/// mode, so a normalization reused by two paths behaves as one layer.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
    mode: Arc<RwLock<BnMode>>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        BatchNormState {
            scale: Param::new(Tensor::full(shape, 1.0), ParamKind::NoDecay),
            shift: Param::new(Tensor::zeros(shape), ParamKind::NoDecay),
            running_mean: Param::new(Tensor::zeros(shape), ParamKind::Buffer),
            running_var: Param::new(Tensor::full(shape, 1.0), ParamKind::Buffer),
            eps: 1e-5,
            momentum: 0.1,
            mode: Arc::new(RwLock::new(BnMode::Train)),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.shape().c()
    }

    pub fn mode(&self) -> BnMode {
        *self.mode.read()
    }

    pub fn set_mode(&self, mode: BnMode) {
        *self.mode.write() = mode;
        let frozen = mode == BnMode::Frozen;
        self.scale.set_frozen(frozen);
        self.shift.set_frozen(frozen);
    }

    /// Switches between train and eval; a frozen layer stays frozen.
    pub fn set_training(&self, training: bool) {
        if self.mode() != BnMode::Frozen {
            self.set_mode(if training {
                BnMode::Train
            } else {
                BnMode::Eval
            });
        }
    }

    pub fn deep_clone(&self) -> Self {
        BatchNormState {
            scale: self.scale.deep_clone(),
            shift: self.shift.deep_clone(),
            running_mean: self.running_mean.deep_clone(),
            running_var: self.running_var.deep_clone(),
            eps: self.eps,
            momentum: self.momentum,
            mode: Arc::new(RwLock::new(self.mode())),
        }
    }

    pub fn params(&self) -> [&Param; 4] {
        [
            &self.scale,
            &self.shift,
            &self.running_mean,
            &self.running_var,
        ]
    }
}

struct BatchNormOp {
    input: Var,
    scale: Var,
    shift: Var,
    /// Normalized input before the affine transform.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl Backward for BatchNormOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input, self.scale, self.shift]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let shape = grad.shape();
        let [n, c, _, _] = shape.dims();
        let plane = shape.plane();
        let m = (n * plane) as f64;
        let gamma = ctx.value(self.scale).data();
        let dy = grad.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let xhat = &self.xhat[base..base + plane];
                for (d, xh) in dy[base..base + plane].iter().zip(xhat) {
                    dbeta[ch] += d;
                    dgamma[ch] += d * xh;
                }
            }
        }
        let dx = ctx.needs_grad(self.input).then(|| {
            let mut dx = vec![0.0; dy.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in base..base + plane {
                        dx[i] = if self.batch_stats {
                            k * (dy[i] - dbeta[ch] / m - self.xhat[i] * dgamma[ch] / m)
                        } else {
                            k * dy[i]
                        };
                    }
                }
            }
            dx
        });
        let vec_shape = Shape::new(1, c, 1, 1);
        Ok(vec![
            dx.map(|d| Tensor::from_vec(shape, d)).transpose()?,
            Some(Tensor::from_vec(vec_shape, dgamma)?),
            Some(Tensor::from_vec(vec_shape, dbeta)?),
        ])
    }
}

impl Tape {
    /// Batch normalization. In train mode the batch statistics normalize the
    /// input and the running statistics are updated in place.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNormState) -> Result<Var> {
        let shape = self.shape(x);
        let [n, c, _, _] = shape.dims();
        if bn.channels() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("input has {c} channels, state has {}", bn.channels()),
            ));
        }
        let plane = shape.plane();
        let m = n * plane;
        let mode = bn.mode();
        let batch_stats = mode == BnMode::Train;
        let (mean, var) = if batch_stats {
            let data = self.value(x).data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for (ch, mu) in mean.iter_mut().enumerate() {
                    let base = (b * c + ch) * plane;
                    *mu += data[base..base + plane].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    var[ch] += data[base..base + plane]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        } else {
            (
                bn.running_mean.read().value.data().to_vec(),
                bn.running_var.read().value.data().to_vec(),
            )
        };
        let mut inv_std = Vec::with_capacity(c);
        for (ch, v) in var.iter().enumerate() {
            let denom = v + bn.eps;
            if !(denom > 0.0 && denom.is_finite()) {
                return Err(Error::NumericalDomain {
                    op: "batch_norm",
                    detail: format!(
                        "channel {ch}: variance {v} + eps {} is not positive",
                        bn.eps
                    ),
                });
            }
            inv_std.push(1.0 / denom.sqrt());
        }
        if batch_stats {
            let unbiased = if m > 1 {
                m as f64 / (m - 1) as f64
            } else {
                1.0
            };
            let mut rm = bn.running_mean.write();
            for (r, mu) in rm.value.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - bn.momentum) * *r + bn.momentum * mu;
            }
            drop(rm);
            let mut rv = bn.running_var.write();
            for (r, v) in rv.value.data_mut().iter_mut().zip(&var) {
                *r = (1.0 - bn.momentum) * *r + bn.momentum * v * unbiased;
            }
        }

        let scale = self.param(&bn.scale);
        let shift = self.param(&bn.shift);
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let data = self.value(x).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = gamma[ch] * xhat[i] + beta[ch];
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(
            value,
            Box::new(BatchNormOp {
                input: x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            }),
        ))
    }
}
