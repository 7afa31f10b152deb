//! Confusion matrices, IoU, and boundary bands.

use crate::eal::{sobel_edges, LabelMap};
use crate::error::{Error, Result};

/// `C×C` pixel counts, rows indexed by ground truth, columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(
                "confusion",
                format!("{} counts for {classes} classes", counts.len()),
            ));
        }
        Ok(Confusion { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Adds every non-ignored pixel (restricted to `mask` when given).
    pub fn add(&mut self, gt: &LabelMap, pred: &[u8], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.ids().len() || mask.is_some_and(|m| m.len() != pred.len()) {
            return Err(Error::shape(
                "confusion",
                format!("{} predictions for {} labels", pred.len(), gt.ids().len()),
            ));
        }
        for (p, (&g, &q)) in gt.ids().iter().zip(pred).enumerate() {
            if g == gt.ignore_id() || mask.is_some_and(|m| !m[p]) {
                continue;
            }
            let (g, q) = (g as usize, q as usize);
            if g >= self.classes || q >= self.classes {
                return Err(Error::shape(
                    "confusion",
                    format!(
                        "class id {} out of range for {} classes",
                        g.max(q),
                        self.classes
                    ),
                ));
            }
            self.counts[g * self.classes + q] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth pixel count per class.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts
            .chunks(self.classes)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|c| (0..self.classes).map(|r| self.get(r, c)).sum())
            .collect()
    }

    /// `TP/(TP+FP+FN)` per class; `None` for classes absent from both
    /// ground truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let rows = self.row_sums();
        let cols = self.col_sums();
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = rows[c] + cols[c] - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over the classes present in ground truth or prediction;
    /// `None` when nothing was counted.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Pixels within Chebyshev distance `band` of a Sobel label edge.
pub fn boundary_band(labels: &LabelMap, classes: usize, band: usize) -> Result<Vec<bool>> {
    let edges = sobel_edges(labels, classes)?;
    let (h, w) = (labels.height(), labels.width());
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(band), (x + band).min(w - 1));
            rows[y * w + x] = (x0..=x1).any(|xx| edges.get(y, xx));
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(band), (y + band).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (y0..=y1).any(|yy| rows[yy * w + x]);
        }
    }
    Ok(out)
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}
