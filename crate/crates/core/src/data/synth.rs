//! Synthetic scenes: disks, rectangles and thin bars over a wide range of
//! sizes, drawn back to front with weakly class-correlated colours.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::eal::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Rectangle,
    ThinBar,
}

impl ShapeFamily {
    /// Family of foreground class `class` (1-based); families cycle when
    /// there are more than three foreground classes.
    pub fn for_class(class: usize) -> Self {
        match (class - 1) % 3 {
            0 => ShapeFamily::Disk,
            1 => ShapeFamily::Rectangle,
            _ => ShapeFamily::ThinBar,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_px: f64,
    pub max_px: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub background: u8,
    pub ignore_id: u8,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Weight of the class prototype in a shape's colour; the rest is random.
    pub color_bias: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            num_classes: 4,
            min_px: 4.0,
            max_px: 48.0,
            min_shapes: 1,
            max_shapes: 4,
            background: 0,
            ignore_id: LabelMap::DEFAULT_IGNORE,
            noise: 0.05,
            color_bias: 0.25,
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.num_classes < 2 || self.num_classes > 255 {
            return fail(format!(
                "classes must be in [2, 255), got {}",
                self.num_classes
            ));
        }
        if self.height == 0 || self.width == 0 {
            return fail("canvas extents must be positive".into());
        }
        if !(self.min_px >= 1.0 && self.min_px <= self.max_px) {
            return fail(format!(
                "need 1 <= min_px <= max_px, got {} and {}",
                self.min_px, self.max_px
            ));
        }
        if self.max_px > self.height.min(self.width) as f64 {
            return fail(format!(
                "max_px {} does not fit the {}×{} canvas",
                self.max_px, self.height, self.width
            ));
        }
        if self.min_shapes > self.max_shapes {
            return fail(format!(
                "min_shapes {} > max_shapes {}",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.background as usize >= self.num_classes {
            return fail(format!("background id {} is not a class", self.background));
        }
        if (self.ignore_id as usize) < self.num_classes {
            return fail(format!(
                "ignore id {} collides with a class id",
                self.ignore_id
            ));
        }
        if self.noise.is_nan() || self.noise < 0.0 || !(0.0..=1.0).contains(&self.color_bias) {
            return fail("noise must be >= 0 and color_bias in [0, 1]".into());
        }
        Ok(())
    }

    fn foreground(&self) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|&c| c != self.background as usize)
            .collect()
    }
}

/// Image in [0,1] with aligned per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub labels: LabelMap,
}

/// One drawn shape: class, family and characteristic size in pixels
/// (diameter, longer side, or bar length).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeInstance {
    pub class: u8,
    pub family: ShapeFamily,
    pub size: f64,
}

const PLACEMENT_RETRIES: usize = 200;

fn prototype(class: usize) -> [f64; 3] {
    const P: [[f64; 3]; 6] = [
        [0.9, 0.3, 0.3],
        [0.3, 0.8, 0.35],
        [0.3, 0.4, 0.9],
        [0.85, 0.8, 0.3],
        [0.75, 0.35, 0.85],
        [0.3, 0.8, 0.85],
    ];
    P[class % P.len()]
}

/// Rasterized mask of one shape as a membership predicate.
enum Geometry {
    Disk {
        cy: f64,
        cx: f64,
        r: f64,
    },
    Rect {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
    },
    Bar {
        ay: f64,
        ax: f64,
        by: f64,
        bx: f64,
        half: f64,
    },
}

impl Geometry {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Geometry::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Geometry::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Geometry::Bar {
                ay,
                ax,
                by,
                bx,
                half,
            } => {
                let (dy, dx) = (by - ay, bx - ax);
                let len2 = dy * dy + dx * dx;
                let t = (((y - ay) * dy + (x - ax) * dx) / len2).clamp(0.0, 1.0);
                let (py, px) = (ay + t * dy, ax + t * dx);
                (y - py).powi(2) + (x - px).powi(2) <= half * half
            }
        }
    }
}

fn sample_geometry(
    family: ShapeFamily,
    size: f64,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Geometry {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    match family {
        ShapeFamily::Disk => {
            let r = size / 2.0;
            Geometry::Disk {
                cy: rng.gen_range(r..=h - r),
                cx: rng.gen_range(r..=w - r),
                r,
            }
        }
        ShapeFamily::Rectangle => {
            let aspect = rng.gen_range(0.5..=1.0);
            let (sh, sw) = if rng.gen_bool(0.5) {
                (size, (size * aspect).max(1.0))
            } else {
                ((size * aspect).max(1.0), size)
            };
            let y0 = rng.gen_range(0.0..=h - sh);
            let x0 = rng.gen_range(0.0..=w - sw);
            Geometry::Rect {
                y0: y0.round(),
                x0: x0.round(),
                y1: (y0 + sh).round(),
                x1: (x0 + sw).round(),
            }
        }
        ShapeFamily::ThinBar => {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let (dy, dx) = (angle.sin() * size / 2.0, angle.cos() * size / 2.0);
            let (ey, ex) = (dy.abs(), dx.abs());
            let cy = rng.gen_range(ey..=h - ey);
            let cx = rng.gen_range(ex..=w - ex);
            Geometry::Bar {
                ay: cy - dy,
                ax: cx - dx,
                by: cy + dy,
                bx: cx + dx,
                half: rng.gen_range(1.5..=2.5),
            }
        }
    }
}

fn rasterize(g: &Geometry, h: usize, w: usize) -> Vec<usize> {
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if g.contains(y as f64 + 0.5, x as f64 + 0.5) {
                pixels.push(y * w + x);
            }
        }
    }
    pixels
}

fn random_color(rng: &mut ChaCha8Rng, class: usize, bias: f64) -> [f64; 3] {
    let p = prototype(class);
    let mut c = [0.0; 3];
    for (ch, v) in c.iter_mut().enumerate() {
        *v = bias * p[ch] + (1.0 - bias) * rng.gen_range(0.1..0.9);
    }
    c
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Deterministic RNG for sample `index`: the seed selects the key and the
/// index the stream.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates sample `index` together with its drawn shapes.
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> Result<(SegSample, Vec<ShapeInstance>)> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, index);
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let bg_a = random_color(&mut rng, cfg.background as usize, cfg.color_bias);
    let bg_b = random_color(&mut rng, cfg.background as usize, cfg.color_bias);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (angle.sin(), angle.cos());
    let mut rgb = vec![[0.0; 3]; plane];
    for y in 0..h {
        for x in 0..w {
            let t =
                0.5 + 0.5 * ((y as f64 / h as f64 - 0.5) * gy + (x as f64 / w as f64 - 0.5) * gx);
            for ch in 0..3 {
                rgb[y * w + x][ch] = (1.0 - t) * bg_a[ch] + t * bg_b[ch];
            }
        }
    }
    let mut ids = vec![cfg.background; plane];
    let mut owner: Vec<Option<usize>> = vec![None; plane];
    let mut areas: Vec<usize> = Vec::new();
    let mut shapes = Vec::new();

    let foreground = cfg.foreground();
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let (lo, hi) = (cfg.min_px.ln(), cfg.max_px.ln());
    for _ in 0..count {
        let class = foreground[rng.gen_range(0..foreground.len())];
        let family = ShapeFamily::for_class(class.max(1));
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let size = if hi > lo {
                rng.gen_range(lo..=hi).exp()
            } else {
                cfg.min_px
            };
            let geom = sample_geometry(family, size, cfg, &mut rng);
            let pixels = rasterize(&geom, h, w);
            if pixels.is_empty() {
                continue;
            }
            // Every earlier shape must keep at least half of its pixels.
            let mut covered = vec![0usize; areas.len()];
            for &p in &pixels {
                if let Some(o) = owner[p] {
                    covered[o] += 1;
                }
            }
            let visible: Vec<usize> = (0..areas.len())
                .map(|o| owner.iter().filter(|&&v| v == Some(o)).count())
                .collect();
            if covered
                .iter()
                .zip(&areas)
                .zip(&visible)
                .all(|((c, a), v)| 2 * (v - c) >= *a)
            {
                placed = Some((size, pixels));
                break;
            }
        }
        let (size, pixels) = placed.ok_or_else(|| {
            Error::Dataset(format!(
                "could not place a shape in sample {index} after {PLACEMENT_RETRIES} attempts"
            ))
        })?;
        let mut color = random_color(&mut rng, class, cfg.color_bias);
        for _ in 0..PLACEMENT_RETRIES {
            let at = rgb[pixels[pixels.len() / 2]];
            if color_distance(color, at) >= 0.3 {
                break;
            }
            color = random_color(&mut rng, class, cfg.color_bias);
        }
        let id = areas.len();
        for &p in &pixels {
            ids[p] = class as u8;
            owner[p] = Some(id);
            rgb[p] = color;
        }
        areas.push(pixels.len());
        shapes.push(ShapeInstance {
            class: class as u8,
            family,
            size,
        });
    }

    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            let v = rgb[p][ch] + cfg.noise * normal.sample(&mut rng);
            data[ch * plane + p] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    let image = Tensor::from_vec(Shape::new(1, 3, h, w), data)?;
    let labels = LabelMap::new(h, w, ids, cfg.ignore_id)?;
    Ok((SegSample { image, labels }, shapes))
}

/// `n` samples; sample `i` depends only on `(cfg, i)`.
pub fn generate(cfg: &SceneConfig, n: usize) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    (0..n)
        .map(|i| generate_scene(cfg, i).map(|(s, _)| s))
        .collect()
}
