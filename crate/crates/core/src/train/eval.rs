//! Single- and multi-scale evaluation, boundary-band mIoU, and the
//! per-scale summary table.

use super::metrics::{boundary_band, population_std, Confusion};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::segnet::SegModel;
use crate::tensor::{crop, reflect_pad, resize_bilinear, Shape, Tape, Tensor};

/// Anything that maps images to per-pixel class scores.
pub trait Predictor {
    fn num_classes(&self) -> usize;

    /// Input extents must be multiples of this.
    fn output_stride(&self) -> usize;

    /// Called once before a round of predictions.
    fn prepare(&self) {}

    /// `N×3×H×W` images to `N×C×H×W` logits.
    fn predict(&self, images: &Tensor) -> Result<Tensor>;
}

impl Predictor for SegModel {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn output_stride(&self) -> usize {
        self.config().output_stride
    }

    fn prepare(&self) {
        self.set_training(false);
    }

    fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Per-pixel argmax over channels for each batch item; ties go to the
/// lowest class id.
pub fn argmax_labels(logits: &Tensor) -> Vec<Vec<u8>> {
    let [n, c, _, _] = logits.shape().dims();
    let plane = logits.shape().plane();
    let d = logits.data();
    (0..n)
        .map(|b| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if d[(b * c + ch) * plane + p] > d[(b * c + best) * plane + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Batch size used when running predictors during evaluation.
pub const EVAL_BATCH: usize = 8;

/// Predicted label maps at `scale`: resize the images, reflect-pad to a
/// multiple of the output stride, predict, crop, resize the logits back to
/// the label extents and take the argmax.
pub fn predict_at_scale<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    scale: f64,
) -> Result<Vec<Vec<u8>>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config(format!(
            "evaluation scale must be positive, got {scale}"
        )));
    }
    let os = model.output_stride();
    let mut out = Vec::with_capacity(ds.len());
    let mut start = 0;
    while start < ds.len() {
        let (h, w) = (
            ds.samples[start].labels.height(),
            ds.samples[start].labels.width(),
        );
        let mut end = start + 1;
        while end < ds.len()
            && end - start < EVAL_BATCH
            && (
                ds.samples[end].labels.height(),
                ds.samples[end].labels.width(),
            ) == (h, w)
        {
            end += 1;
        }
        let sh = ((h as f64 * scale).round() as usize).max(1);
        let sw = ((w as f64 * scale).round() as usize).max(1);
        let (ph, pw) = (sh.div_ceil(os) * os, sw.div_ceil(os) * os);
        let mut batch = Vec::with_capacity(end - start);
        for s in &ds.samples[start..end] {
            let img = if (sh, sw) == (h, w) {
                s.image.clone()
            } else {
                resize_bilinear(&s.image, sh, sw)?
            };
            let img = if (ph, pw) == (sh, sw) {
                img
            } else {
                if ph - sh >= sh || pw - sw >= sw {
                    return Err(Error::shape(
                        "evaluate",
                        format!("scaled extents {sh}×{sw} too small to reflect-pad to {ph}×{pw}"),
                    ));
                }
                reflect_pad(&img, ph - sh, pw - sw)
            };
            batch.push(img);
        }
        let logits = model.predict(&Tensor::stack(&batch)?)?;
        let logits = if (ph, pw) == (sh, sw) {
            logits
        } else {
            crop(&logits, sh, sw)?
        };
        let logits = if (sh, sw) == (h, w) {
            logits
        } else {
            resize_bilinear(&logits, h, w)?
        };
        out.extend(argmax_labels(&logits));
        start = end;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleResult {
    pub scale: f64,
    pub confusion: Confusion,
    pub miou: f64,
    /// Restricted to the boundary band; `None` when the data has no edges.
    pub boundary_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_scale: Vec<ScaleResult>,
    /// Population standard deviation of the per-scale mIoU.
    pub std: f64,
}

impl EvalReport {
    pub fn mious(&self) -> Vec<f64> {
        self.per_scale.iter().map(|s| s.miou).collect()
    }

    pub fn mean_miou(&self) -> f64 {
        let m = self.mious();
        m.iter().sum::<f64>() / m.len() as f64
    }
}

/// Boundary-band masks for every sample, and whether any edge exists.
fn bands(ds: &Dataset, band: usize) -> Result<(Vec<Vec<bool>>, bool)> {
    let masks: Vec<Vec<bool>> = ds
        .samples
        .iter()
        .map(|s| boundary_band(&s.labels, ds.num_classes, band))
        .collect::<Result<_>>()?;
    let any = masks.iter().flatten().any(|&b| b);
    Ok((masks, any))
}

/// Confusion matrices (full and boundary band) at each scale.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    scales: &[f64],
    band: usize,
) -> Result<EvalReport> {
    if scales.is_empty() {
        return Err(Error::config("evaluate needs at least one scale"));
    }
    if band == 0 {
        return Err(Error::config("boundary band must be >= 1 px"));
    }
    if model.num_classes() != ds.num_classes {
        return Err(Error::config(format!(
            "model predicts {} classes, dataset has {}",
            model.num_classes(),
            ds.num_classes
        )));
    }
    if ds.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    model.prepare();
    let (masks, any_edge) = bands(ds, band)?;
    let mut per_scale = Vec::with_capacity(scales.len());
    for &scale in scales {
        let preds = predict_at_scale(model, ds, scale)?;
        let mut full = Confusion::new(ds.num_classes);
        let mut edge = Confusion::new(ds.num_classes);
        for ((s, p), m) in ds.samples.iter().zip(&preds).zip(&masks) {
            full.add(&s.labels, p, None)?;
            edge.add(&s.labels, p, Some(m))?;
        }
        per_scale.push(ScaleResult {
            scale,
            miou: full.miou().unwrap_or(0.0),
            boundary_miou: if any_edge { edge.miou() } else { None },
            confusion: full,
        });
    }
    let mious: Vec<f64> = per_scale.iter().map(|s| s.miou).collect();
    Ok(EvalReport {
        std: population_std(&mious),
        per_scale,
    })
}

/// mIoU over pixels within `band` px of a ground-truth edge, at scale 1.
pub fn boundary_miou<P: Predictor + ?Sized>(model: &P, ds: &Dataset, band: usize) -> Result<f64> {
    if band == 0 {
        return Err(Error::config("boundary band must be >= 1 px"));
    }
    let (_, any) = bands(ds, band)?;
    if !any {
        return Err(Error::Dataset(
            "no label edges in the dataset; boundary mIoU is undefined".into(),
        ));
    }
    let report = evaluate(model, ds, &[1.0], band)?;
    Ok(report.per_scale[0].boundary_miou.expect("edges present"))
}

fn scale_label(s: f64) -> String {
    format!("{s}s")
}

/// Text table with one column per scale plus STD; values in percent.
pub fn summary_table(rows: &[(String, &EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["Method".to_string()];
    header.extend(first.per_scale.iter().map(|s| scale_label(s.scale)));
    header.push("STD".into());
    let mut lines = vec![header];
    for (name, r) in rows {
        let mut line = vec![name.clone()];
        line.extend(r.per_scale.iter().map(|s| format!("{:.2}", 100.0 * s.miou)));
        line.push(format!("{:.2}", 100.0 * r.std));
        lines.push(line);
    }
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let width_of = |c: usize| {
        lines
            .iter()
            .filter_map(|l| l.get(c))
            .map(String::len)
            .max()
            .unwrap_or(0)
    };
    let value_width = (1..cols).map(width_of).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| if c == 0 { width_of(0) } else { value_width })
        .collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-|-"));
            out.push('\n');
        }
    }
    out
}

/// Constant-shape helper for predictors in tests and tools: one-hot logits.
pub fn one_hot_logits(labels: &[Vec<u8>], classes: usize, h: usize, w: usize) -> Result<Tensor> {
    let n = labels.len();
    let plane = h * w;
    let mut data = vec![0.0; n * classes * plane];
    for (b, l) in labels.iter().enumerate() {
        for (p, &c) in l.iter().enumerate() {
            if (c as usize) < classes {
                data[(b * classes + c as usize) * plane + p] = 1.0;
            }
        }
    }
    Tensor::from_vec(Shape::new(n, classes, h, w), data)
}
