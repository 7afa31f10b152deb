//! Central finite-difference verification of analytic gradients.

use super::{Param, Tape, Tensor, Var};
use crate::error::Result;

const STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error among checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step evaluations changed a relu sign pattern.
    pub skipped: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Accumulates analytic/numeric pairs into a report.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`
/// where `floor = 1e-3 · max|a|` over the checked set: components that are
/// tiny compared to the gradient as a whole are judged on that scale.
struct Accumulator {
    pairs: Vec<(f64, f64)>,
    skipped: usize,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            pairs: Vec::new(),
            skipped: 0,
        }
    }

    fn finish(self, tol: f64) -> GradCheckReport {
        let scale = self.pairs.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max);
        let floor = (1e-3 * scale).max(1e-12);
        let max_rel_error = self
            .pairs
            .iter()
            .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max);
        GradCheckReport {
            max_rel_error,
            checked: self.pairs.len(),
            skipped: self.skipped,
            tol,
            passed: max_rel_error <= tol,
        }
    }
}

fn evaluate<F>(f: &mut F, x: Tensor) -> Result<(f64, Vec<bool>)>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let out = f(&mut tape, xv)?;
    Ok((tape.value(out).item(), tape.relu_pattern().to_vec()))
}

/// Compares the gradient of scalar `f` at `x` against central differences
/// (step 1e-4). Coordinates where a ±step move flips any relu input sign
/// are excluded from the report.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let base_pattern = tape.relu_pattern().to_vec();
    drop(tape);

    let mut acc = Accumulator::new();
    for i in 0..x.shape().numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let (fp, pp) = evaluate(&mut f, xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let (fm, pm) = evaluate(&mut f, xm)?;
        if pp != base_pattern || pm != base_pattern {
            acc.skipped += 1;
            continue;
        }
        acc.pairs
            .push((analytic.data()[i], (fp - fm) / (2.0 * STEP)));
    }
    Ok(acc.finish(tol))
}

/// Coordinates probed in a tensor of `numel` entries: all of them, or at
/// most `limit` evenly spaced ones.
fn probe_indices(numel: usize, limit: usize) -> Vec<usize> {
    if numel <= limit {
        (0..numel).collect()
    } else {
        (0..limit)
            .map(|k| k * numel / limit + (numel / limit) / 2)
            .collect()
    }
}

/// Finite-difference check of parameter gradients for a closure that builds
/// its whole computation (including parameter registration) on a fresh tape.
pub fn finite_diff_check_params<F>(
    mut f: F,
    params: &[Param],
    tol: f64,
    coords_per_param: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    params.iter().for_each(Param::zero_grad);
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    tape.backward(out)?;
    let base_pattern = tape.relu_pattern().to_vec();
    drop(tape);
    let analytic: Vec<Tensor> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut eval_at = |p: &Param, i: usize, delta: f64| -> Result<(f64, Vec<bool>)> {
        let original = p.read().value.data()[i];
        p.write().value.data_mut()[i] = original + delta;
        let mut tape = Tape::new();
        let result = f(&mut tape);
        p.write().value.data_mut()[i] = original;
        let out = result?;
        Ok((tape.value(out).item(), tape.relu_pattern().to_vec()))
    };

    let mut acc = Accumulator::new();
    for (p, grad) in params.iter().zip(&analytic) {
        for i in probe_indices(p.numel(), coords_per_param) {
            let (fp, pp) = eval_at(p, i, STEP)?;
            let (fm, pm) = eval_at(p, i, -STEP)?;
            if pp != base_pattern || pm != base_pattern {
                acc.skipped += 1;
                continue;
            }
            acc.pairs.push((grad.data()[i], (fp - fm) / (2.0 * STEP)));
        }
    }
    params.iter().for_each(Param::zero_grad);
    Ok(acc.finish(tol))
}
