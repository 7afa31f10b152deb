//! Training-time augmentation: random scale from a fixed set, horizontal
//! flip, and a random crop (or padded placement) to a square window.

use rand::Rng;

use super::synth::SegSample;
use crate::eal::LabelMap;
use crate::error::Result;
use crate::tensor::{resize_bilinear, Shape, Tensor};

pub const SCALES: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    /// Top-left of the crop window in the scaled image; negative values
    /// place the scaled image inside a larger padded window.
    pub offset_y: isize,
    pub offset_x: isize,
}

/// Nearest-neighbour label resize with half-pixel centers.
pub fn resize_labels_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let src = |o: usize, inn: usize, out: usize| {
        (((o as f64 + 0.5) * inn as f64 / out as f64) as usize).min(inn - 1)
    };
    let mut ids = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = src(y, h, out_h);
        for x in 0..out_w {
            ids.push(labels.get(sy, src(x, w, out_w)));
        }
    }
    LabelMap::new(out_h, out_w, ids, labels.ignore_id()).expect("positive extents")
}

pub fn scaled_extent(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

fn flip_image(img: &Tensor) -> Tensor {
    let [n, c, h, w] = img.shape().dims();
    let mut out = img.clone();
    for plane in 0..n * c {
        for y in 0..h {
            let row = &mut out.data_mut()[(plane * h + y) * w..(plane * h + y + 1) * w];
            row.reverse();
        }
    }
    out
}

fn flip_labels(labels: &LabelMap) -> LabelMap {
    let mut out = labels.clone();
    let w = labels.width();
    for row in out.ids_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Draws scale, flip and crop offset for an `h×w` sample and `crop` window.
pub fn draw_params<R: Rng + ?Sized>(h: usize, w: usize, crop: usize, rng: &mut R) -> AugmentParams {
    let scale = SCALES[rng.gen_range(0..SCALES.len())];
    let flip = rng.gen_bool(0.5);
    let offset = |len: usize, rng: &mut R| {
        let len = scaled_extent(len, scale) as isize;
        let crop = crop as isize;
        if len >= crop {
            rng.gen_range(0..=len - crop)
        } else {
            -rng.gen_range(0..=crop - len)
        }
    };
    let offset_y = offset(h, rng);
    let offset_x = offset(w, rng);
    AugmentParams {
        scale,
        flip,
        offset_y,
        offset_x,
    }
}

/// Applies concrete parameters. Window pixels outside the scaled image get
/// the per-channel image mean and the ignore id.
pub fn apply(s: &SegSample, p: &AugmentParams, crop: usize) -> Result<SegSample> {
    let (h, w) = (s.labels.height(), s.labels.width());
    let (sh, sw) = (scaled_extent(h, p.scale), scaled_extent(w, p.scale));
    let (mut image, mut labels) = if (sh, sw) == (h, w) {
        (s.image.clone(), s.labels.clone())
    } else {
        let mut img = resize_bilinear(&s.image, sh, sw)?;
        img.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
        (img, resize_labels_nearest(&s.labels, sh, sw))
    };
    if p.flip {
        image = flip_image(&image);
        labels = flip_labels(&labels);
    }
    let plane = sh * sw;
    let means: Vec<f64> = image
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect();
    let mut out = vec![0.0; 3 * crop * crop];
    let mut ids = vec![labels.ignore_id(); crop * crop];
    for y in 0..crop {
        let sy = y as isize + p.offset_y;
        for x in 0..crop {
            let sx = x as isize + p.offset_x;
            let inside = sy >= 0 && sx >= 0 && (sy as usize) < sh && (sx as usize) < sw;
            for ch in 0..3 {
                out[ch * crop * crop + y * crop + x] = if inside {
                    image.data()[ch * plane + sy as usize * sw + sx as usize]
                } else {
                    means[ch]
                };
            }
            if inside {
                ids[y * crop + x] = labels.get(sy as usize, sx as usize);
            }
        }
    }
    Ok(SegSample {
        image: Tensor::from_vec(Shape::new(1, 3, crop, crop), out)?,
        labels: LabelMap::new(crop, crop, ids, labels.ignore_id())?,
    })
}

/// Random scale, flip and crop to `crop×crop`.
pub fn augment<R: Rng + ?Sized>(s: &SegSample, crop: usize, rng: &mut R) -> Result<SegSample> {
    let p = draw_params(s.labels.height(), s.labels.width(), crop, rng);
    apply(s, &p, crop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> SegSample {
        generate(&SceneConfig::default(), 1).unwrap().remove(0)
    }

    #[test]
    fn identity_scale_is_a_crop() {
        let s = sample();
        let p = AugmentParams {
            scale: 1.0,
            flip: false,
            offset_y: 8,
            offset_x: 4,
        };
        let a = apply(&s, &p, 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(a.labels.get(y, x), s.labels.get(y + 8, x + 4));
                assert_eq!(a.image.at(0, 1, y, x), s.image.at(0, 1, y + 8, x + 4));
            }
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let flipped = apply(
            &s,
            &AugmentParams {
                scale: 1.0,
                flip: true,
                offset_y: 0,
                offset_x: 0,
            },
            64,
        )
        .unwrap();
        let back = apply(
            &flipped,
            &AugmentParams {
                scale: 1.0,
                flip: true,
                offset_y: 0,
                offset_x: 0,
            },
            64,
        )
        .unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn downscale_pads_with_ignore_and_mean() {
        let s = sample();
        let p = AugmentParams {
            scale: 0.5,
            flip: false,
            offset_y: -10,
            offset_x: -5,
        };
        let a = apply(&s, &p, 64).unwrap();
        assert_eq!(a.labels.get(0, 0), 255);
        assert_ne!(a.labels.get(10, 5), 255);
        assert_eq!(a.labels.get(42, 5), 255);
    }

    #[test]
    fn scale_two_extent() {
        assert_eq!(scaled_extent(64, 2.0), 128);
        assert_eq!(scaled_extent(64, 0.75), 48);
    }

    #[test]
    fn never_invents_ids() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut allowed = s.labels.distinct_ids();
        allowed.insert(255);
        for _ in 0..20 {
            let a = augment(&s, 64, &mut rng).unwrap();
            assert!(a.labels.distinct_ids().is_subset(&allowed));
        }
    }
}
