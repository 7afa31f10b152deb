use super::tape::{Backward, BackwardCtx};
use super::{Shape, Tape, Tensor, Var};
use crate::eal::{LabelMap, WeightMap};
use crate::error::{Error, Result};

struct WeightedCeOp {
    logits: Var,
    /// Per pixel: label (or `None` when ignored) and normalized weight.
    targets: Vec<Option<(usize, f64)>>,
}

impl Backward for WeightedCeOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.value(self.logits);
        let shape = x.shape();
        let [n, c, _, _] = shape.dims();
        let plane = shape.plane();
        let g = grad.item();
        let mut dx = vec![0.0; shape.numel()];
        for b in 0..n {
            for p in 0..plane {
                let Some((label, w)) = self.targets[b * plane + p] else {
                    continue;
                };
                if w == 0.0 {
                    continue;
                }
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let max = (0..c)
                    .map(|ch| x.data()[idx(ch)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..c).map(|ch| (x.data()[idx(ch)] - max).exp()).sum();
                for ch in 0..c {
                    let prob = (x.data()[idx(ch)] - max).exp() / total;
                    let target = if ch == label { 1.0 } else { 0.0 };
                    dx[idx(ch)] = g * w * (prob - target);
                }
            }
        }
        Ok(vec![Some(Tensor::from_vec(shape, dx)?)])
    }
}

/// Checks that labels and weights line up with `N×C×H×W` logits.
pub(crate) fn validate_targets(
    shape: Shape,
    labels: &[LabelMap],
    weights: Option<&[WeightMap]>,
) -> Result<()> {
    let [n, c, h, w] = shape.dims();
    if c < 2 {
        return Err(Error::shape(
            "cross_entropy",
            format!("need at least 2 classes, logits have {c}"),
        ));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} label maps for batch of {n}", labels.len()),
        ));
    }
    for lm in labels {
        if (lm.height(), lm.width()) != (h, w) {
            return Err(Error::shape(
                "cross_entropy",
                format!("label map {}×{} vs logits {h}×{w}", lm.height(), lm.width()),
            ));
        }
        lm.validate(c)?;
    }
    if let Some(weights) = weights {
        if weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} weight maps for batch of {n}", weights.len()),
            ));
        }
        for wm in weights {
            if (wm.height(), wm.width()) != (h, w) {
                return Err(Error::shape(
                    "cross_entropy",
                    format!(
                        "weight map {}×{} vs logits {h}×{w}",
                        wm.height(),
                        wm.width()
                    ),
                ));
            }
        }
    }
    Ok(())
}

impl Tape {
    /// Weighted softmax cross-entropy, normalized by the total effective
    /// weight: `Σ w·(−log p[label]) / Σ w`. Pixels carrying the ignore id
    /// contribute to neither sum. The weights are constants.
    pub fn softmax_cross_entropy_weighted(
        &mut self,
        logits: Var,
        labels: &[LabelMap],
        weights: &[WeightMap],
    ) -> Result<Var> {
        let x = self.value(logits);
        let shape = x.shape();
        validate_targets(shape, labels, Some(weights))?;
        let [n, c, _, _] = shape.dims();
        let plane = shape.plane();

        let mut targets = Vec::with_capacity(n * plane);
        let mut total_weight = 0.0;
        for (lm, wm) in labels.iter().zip(weights) {
            for (p, &id) in lm.ids().iter().enumerate() {
                if id == lm.ignore_id() {
                    targets.push(None);
                } else {
                    let w = wm.values()[p];
                    total_weight += w;
                    targets.push(Some((id as usize, w)));
                }
            }
        }

        let mut loss = 0.0;
        if total_weight > 0.0 {
            for b in 0..n {
                for p in 0..plane {
                    let Some((label, w)) = targets[b * plane + p] else {
                        continue;
                    };
                    if w == 0.0 {
                        continue;
                    }
                    let idx = |ch: usize| (b * c + ch) * plane + p;
                    let max = (0..c)
                        .map(|ch| x.data()[idx(ch)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let lse = max
                        + (0..c)
                            .map(|ch| (x.data()[idx(ch)] - max).exp())
                            .sum::<f64>()
                            .ln();
                    loss += w * (lse - x.data()[idx(label)]);
                }
            }
            loss /= total_weight;
            for t in targets.iter_mut().flatten() {
                t.1 /= total_weight;
            }
        } else {
            targets.iter_mut().for_each(|t| *t = None);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Box::new(WeightedCeOp { logits, targets }),
        ))
    }

    /// Unweighted mean cross-entropy over non-ignored pixels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[LabelMap]) -> Result<Var> {
        let weights: Vec<WeightMap> = labels
            .iter()
            .map(|lm| WeightMap::uniform(lm.height(), lm.width(), 1.0))
            .collect();
        self.softmax_cross_entropy_weighted(logits, labels, &weights)
    }
}
