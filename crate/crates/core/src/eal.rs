//! Edge-aware loss: Sobel edges on the ground-truth label map, a clamped
//! k×k edge count as per-pixel weights, and the weighted cross-entropy.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Per-pixel class ids with a dedicated ignore id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
    ignore_id: u8,
}

impl LabelMap {
    pub const DEFAULT_IGNORE: u8 = 255;

    pub fn new(height: usize, width: usize, ids: Vec<u8>, ignore_id: u8) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::shape(
                "label_map",
                format!("{} ids for {height}×{width}", ids.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            ids,
            ignore_id,
        })
    }

    pub fn filled(height: usize, width: usize, id: u8, ignore_id: u8) -> Self {
        Self::new(height, width, vec![id; height * width], ignore_id).expect("non-empty label map")
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn ids(&self) -> &[u8] {
        &self.ids
    }
    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }
    pub fn ignore_id(&self) -> u8 {
        self.ignore_id
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn is_ignored(&self, p: usize) -> bool {
        self.ids[p] == self.ignore_id
    }

    /// Every id must be below `num_classes` or equal to the ignore id, and
    /// the ignore id itself must not be a class.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if (self.ignore_id as usize) < num_classes {
            return Err(Error::config(format!(
                "ignore id {} collides with a class id (classes: {num_classes})",
                self.ignore_id
            )));
        }
        match self
            .ids
            .iter()
            .position(|&id| id != self.ignore_id && id as usize >= num_classes)
        {
            Some(pixel) => Err(Error::InvalidLabel {
                label: self.ids[pixel],
                pixel,
                classes: num_classes,
                ignore: self.ignore_id,
            }),
            None => Ok(()),
        }
    }

    /// Distinct ids present, including the ignore id if any pixel carries it.
    pub fn distinct_ids(&self) -> BTreeSet<u8> {
        self.ids.iter().copied().collect()
    }
}

/// Binary edge mask over a label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    edges: Vec<bool>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, edges: Vec<bool>) -> Result<Self> {
        if edges.len() != height * width {
            return Err(Error::shape(
                "edge_map",
                format!("{} entries for {height}×{width}", edges.len()),
            ));
        }
        Ok(EdgeMap {
            height,
            width,
            edges,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn edges(&self) -> &[bool] {
        &self.edges
    }
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.edges[y * self.width + x]
    }
    pub fn count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.edges[y * self.width + x] = value;
    }
}

/// Non-negative per-pixel loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl WeightMap {
    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        WeightMap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::shape(
                "weight_map",
                format!(
                    "{} non-negative values expected for {height}×{width}",
                    height * width
                ),
            ));
        }
        Ok(WeightMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// 8-bit rendering with `value = round(w · 255 / m)`.
    pub fn to_gray(&self, m: u32) -> Vec<u8> {
        let scale = 255.0 / m as f64;
        self.values
            .iter()
            .map(|w| (w * scale).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Window size `k` (odd, ≥ 3) and weight threshold `m` (≥ 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EalConfig {
    pub k: usize,
    pub m: u32,
}

impl Default for EalConfig {
    fn default() -> Self {
        EalConfig { k: 5, m: 3 }
    }
}

impl EalConfig {
    pub fn new(k: usize, m: u32) -> Result<Self> {
        let cfg = EalConfig { k, m };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 || self.k.is_multiple_of(2) {
            return Err(Error::config(format!(
                "eal k must be odd and >= 3, got {}",
                self.k
            )));
        }
        if self.m < 1 {
            return Err(Error::config("eal m must be >= 1"));
        }
        Ok(())
    }
}

const SOBEL_X: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
const SOBEL_Y: [[i32; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];

/// Sobel edges of the one-hot encoded label map.
///
/// Each class channel is filtered with the 3×3 Sobel pair under replicate
/// border padding. A pixel is an edge iff the summed squared response over
/// classes is positive. Ignored pixels are never edges, and inside a window
/// they take the center pixel's class so that ignore regions do not create
/// edges in their neighbours.
pub fn sobel_edges(labels: &LabelMap, num_classes: usize) -> Result<EdgeMap> {
    if num_classes < 2 {
        return Err(Error::config(format!(
            "sobel_edges needs at least 2 classes, got {num_classes}"
        )));
    }
    labels.validate(num_classes)?;
    let (h, w) = (labels.height, labels.width);
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut edges = vec![false; h * w];
    let mut window = [0u8; 9];
    for y in 0..h {
        for x in 0..w {
            let center = labels.get(y, x);
            if center == labels.ignore_id {
                continue;
            }
            for dy in 0..3 {
                for dx in 0..3 {
                    let sy = clamp(y as isize + dy as isize - 1, h);
                    let sx = clamp(x as isize + dx as isize - 1, w);
                    let id = labels.get(sy, sx);
                    window[dy * 3 + dx] = if id == labels.ignore_id { center } else { id };
                }
            }
            let mut energy = 0i64;
            let mut seen = [false; 256];
            for &class in &window {
                if seen[class as usize] {
                    continue;
                }
                seen[class as usize] = true;
                let (mut gx, mut gy) = (0i32, 0i32);
                for (i, &id) in window.iter().enumerate() {
                    if id == class {
                        gx += SOBEL_X[i / 3][i % 3];
                        gy += SOBEL_Y[i / 3][i % 3];
                    }
                }
                energy += i64::from(gx * gx + gy * gy);
            }
            edges[y * w + x] = energy > 0;
        }
    }
    EdgeMap::new(h, w, edges)
}

/// Clamped edge counts: the number of edge pixels in the zero-padded k×k
/// window centered on each pixel, clamped to `[1, m]`; ignored pixels get 0.
pub fn weight_map(edges: &EdgeMap, cfg: &EalConfig, labels: &LabelMap) -> Result<WeightMap> {
    cfg.validate()?;
    if (edges.height, edges.width) != (labels.height, labels.width) {
        return Err(Error::shape(
            "weight_map",
            format!(
                "edge map {}×{} vs labels {}×{}",
                edges.height, edges.width, labels.height, labels.width
            ),
        ));
    }
    let (h, w) = (edges.height, edges.width);
    // Integral image with a zero row/column in front.
    let mut integral = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += u32::from(edges.get(y, x));
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let r = cfg.k / 2;
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            if labels.is_ignored(y * w + x) {
                values.push(0.0);
                continue;
            }
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let count = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
            values.push(f64::from(count.clamp(1, cfg.m)));
        }
    }
    WeightMap::new(h, w, values)
}

/// Edge-aware weight maps for a batch.
pub fn eal_weights(
    labels: &[LabelMap],
    num_classes: usize,
    cfg: &EalConfig,
) -> Result<Vec<WeightMap>> {
    labels
        .iter()
        .map(|lm| weight_map(&sobel_edges(lm, num_classes)?, cfg, lm))
        .collect()
}

impl Tape {
    /// Cross-entropy weighted by the edge-aware weight maps of `labels`.
    pub fn eal_loss(&mut self, logits: Var, labels: &[LabelMap], cfg: &EalConfig) -> Result<Var> {
        let shape = self.shape(logits);
        crate::tensor::validate_targets(shape, labels, None)?;
        let weights = eal_weights(labels, shape.c(), cfg)?;
        self.softmax_cross_entropy_weighted(logits, labels, &weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(h: usize, w: usize, col: usize) -> LabelMap {
        let ids = (0..h * w).map(|p| u8::from(p % w >= col)).collect();
        LabelMap::new(h, w, ids, 255).unwrap()
    }

    #[test]
    fn constant_labels_have_no_edges() {
        let lm = LabelMap::filled(7, 9, 2, 255);
        assert_eq!(sobel_edges(&lm, 3).unwrap().count(), 0);
    }

    #[test]
    fn vertical_split_marks_the_two_straddling_columns() {
        let lm = split(6, 10, 4);
        let e = sobel_edges(&lm, 2).unwrap();
        for y in 0..6 {
            for x in 0..10 {
                assert_eq!(e.get(y, x), x == 3 || x == 4, "({y},{x})");
            }
        }
    }

    #[test]
    fn single_pixel_edges_are_its_ring() {
        // The Sobel kernels have a zero center, so the differing pixel itself
        // has zero response; its eight neighbours do not.
        let mut lm = LabelMap::filled(7, 7, 0, 255);
        lm.ids_mut()[3 * 7 + 3] = 1;
        let e = sobel_edges(&lm, 2).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                let cheb = (y as isize - 3).abs().max((x as isize - 3).abs());
                assert_eq!(e.get(y, x), cheb == 1, "({y},{x})");
            }
        }
    }

    #[test]
    fn ignore_regions_do_not_create_edges() {
        let mut lm = LabelMap::filled(5, 5, 1, 255);
        for p in 0..10 {
            lm.ids_mut()[p] = 255;
        }
        assert_eq!(sobel_edges(&lm, 2).unwrap().count(), 0);
        let wm = weight_map(&sobel_edges(&lm, 2).unwrap(), &EalConfig::default(), &lm).unwrap();
        assert!(wm.values()[..10].iter().all(|&v| v == 0.0));
        assert!(wm.values()[10..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sobel_rejects_bad_inputs() {
        let lm = LabelMap::filled(3, 3, 0, 255);
        assert!(sobel_edges(&lm, 1).is_err());
        let bad = LabelMap::new(1, 2, vec![0, 7], 255).unwrap();
        assert!(matches!(
            sobel_edges(&bad, 3),
            Err(Error::InvalidLabel { label: 7, .. })
        ));
    }

    #[test]
    fn split_weights_clamp_to_m_near_the_boundary() {
        let lm = split(12, 16, 8);
        let e = sobel_edges(&lm, 2).unwrap();
        let wm = weight_map(&e, &EalConfig::new(5, 3).unwrap(), &lm).unwrap();
        for y in 2..10 {
            for x in 0..16 {
                let expected = if (5..=10).contains(&x) { 3.0 } else { 1.0 };
                assert_eq!(wm.get(y, x), expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn gray_export_scales_by_255_over_m() {
        let wm = WeightMap::new(1, 3, vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(wm.to_gray(3), vec![0, 85, 255]);
    }

    #[test]
    fn config_validation() {
        assert!(EalConfig::new(4, 3).is_err());
        assert!(EalConfig::new(1, 3).is_err());
        assert!(EalConfig::new(3, 0).is_err());
        assert!(EalConfig::new(7, 5).is_ok());
    }
}
