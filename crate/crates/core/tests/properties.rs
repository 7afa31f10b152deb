//! Property-based invariants across modules.

use std::collections::BTreeSet;

use mrfseg::config::Config;
use mrfseg::data::augment::{apply, resize_labels_nearest, AugmentParams};
use mrfseg::data::netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use mrfseg::data::{generate, Gray, SceneConfig, SegSample};
use mrfseg::eal::{eal_weights, EalConfig, LabelMap, WeightMap};
use mrfseg::mrfm::{receptive_field, Layer, LayerSpec};
use mrfseg::tensor::{Param, ParamKind, Shape, Tape, Tensor};
use mrfseg::train::{poly_lr, sgd_step, Confusion, Sgd};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn label_map(max: usize, classes: u8) -> impl Strategy<Value = LabelMap> {
    (2..=max, 2..=max).prop_flat_map(move |(h, w)| {
        prop::collection::vec(prop_oneof![9 => 0..classes, 1 => Just(255u8)], h * w)
            .prop_map(move |ids| LabelMap::new(h, w, ids, 255).unwrap())
    })
}

fn eal_config() -> impl Strategy<Value = EalConfig> {
    (prop_oneof![Just(3usize), Just(5), Just(7)], 1u32..=6)
        .prop_map(|(k, m)| EalConfig::new(k, m).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn softmax_path_weights_are_a_partition(a in -300.0f64..300.0, b in -300.0f64..300.0) {
        let mut tape = Tape::inference();
        let l = tape.constant(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![a, b]).unwrap());
        let w = tape.softmax_channels(l);
        let d = tape.value(w).data();
        prop_assert!((d[0] + d[1] - 1.0).abs() <= f64::EPSILON);
        prop_assert!(d[0] > 0.0 && d[1] > 0.0);
    }

    #[test]
    fn weight_map_is_integral_and_capped(lm in label_map(16, 4), cfg in eal_config()) {
        let w = &eal_weights(std::slice::from_ref(&lm), 4, &cfg).unwrap()[0];
        for (p, &v) in w.values().iter().enumerate() {
            if lm.is_ignored(p) {
                prop_assert_eq!(v, 0.0);
            } else {
                prop_assert_eq!(v.fract(), 0.0);
                prop_assert!(v >= 1.0 && v <= f64::from(cfg.m));
            }
        }
    }

    #[test]
    fn weighted_ce_ignores_weight_scale(lm in label_map(8, 3), factor in 0.01f64..100.0, seed in 0u64..1000) {
        prop_assume!(lm.ids().iter().any(|&id| id != 255));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(Shape::new(1, 3, lm.height(), lm.width()), 1.0, &mut rng);
        let base = Tensor::uniform(Shape::new(1, 1, lm.height(), lm.width()), 0.1, 3.0, &mut rng);
        let w1 = WeightMap::new(lm.height(), lm.width(), base.data().to_vec()).unwrap();
        let w2 = WeightMap::new(lm.height(), lm.width(), base.data().iter().map(|v| v * factor).collect()).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let a = tape.softmax_cross_entropy_weighted(xv, std::slice::from_ref(&lm), &[w1]).unwrap();
        let b = tape.softmax_cross_entropy_weighted(xv, std::slice::from_ref(&lm), &[w2]).unwrap();
        let (a, b) = (tape.value(a).item(), tape.value(b).item());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn augmentation_never_invents_ids(
        seed in 0u64..500,
        scale in prop_oneof![Just(0.5f64), Just(0.75), Just(1.0), Just(1.5), Just(2.0)],
        flip in any::<bool>(),
        oy in -20isize..40,
        ox in -20isize..40,
    ) {
        let cfg = SceneConfig { seed, ..SceneConfig::default() };
        let s = &generate(&cfg, 1).unwrap()[0];
        let out = apply(s, &AugmentParams { scale, flip, offset_y: oy, offset_x: ox }, 48).unwrap();
        let mut allowed = s.labels.distinct_ids();
        allowed.insert(255);
        prop_assert!(out.labels.distinct_ids().is_subset(&allowed));
        prop_assert_eq!((out.labels.height(), out.labels.width()), (48, 48));
    }

    #[test]
    fn integer_upscaling_keeps_rectangles(
        h in 2usize..12, w in 2usize..12, f in 1usize..4,
        y0 in 0usize..12, x0 in 0usize..12, rh in 1usize..6, rw in 1usize..6,
    ) {
        let (y0, x0) = (y0 % h, x0 % w);
        let (y1, x1) = ((y0 + rh).min(h), (x0 + rw).min(w));
        let ids = (0..h * w).map(|p| u8::from((y0..y1).contains(&(p / w)) && (x0..x1).contains(&(p % w)))).collect();
        let lm = LabelMap::new(h, w, ids, 255).unwrap();
        let up = resize_labels_nearest(&lm, h * f, w * f);
        for y in 0..h * f {
            for x in 0..w * f {
                let inside = (y0 * f..y1 * f).contains(&y) && (x0 * f..x1 * f).contains(&x);
                prop_assert_eq!(up.get(y, x), u8::from(inside));
            }
        }
    }

    #[test]
    fn poly_lr_strictly_decreases(base in 1e-4f64..1.0, power in 0.1f64..3.0, max in 2usize..5000) {
        let mut last = f64::INFINITY;
        for i in (0..max).step_by((max / 50).max(1)) {
            let lr = poly_lr(base, power, i, max);
            prop_assert!(lr < last);
            last = lr;
        }
    }

    #[test]
    fn zero_lr_sgd_is_identity(
        p in prop::collection::vec(-10.0f64..10.0, 1..20),
        seed in 0u64..1000,
        momentum in 0.0f64..0.99,
        wd in 0.0f64..0.01,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::randn(Shape::new(1, 1, 1, p.len()), 1.0, &mut rng).into_data();
        let mut v = Tensor::randn(Shape::new(1, 1, 1, p.len()), 1.0, &mut rng).into_data();
        let mut q = p.clone();
        sgd_step(&mut q, &g, &mut v, 0.0, momentum, wd);
        prop_assert_eq!(q, p);
    }

    #[test]
    fn decay_spares_norm_and_logit_parameters(
        vals in prop::collection::vec(-5.0f64..5.0, 4),
        wd in 1e-5f64..0.1,
        lr in 1e-3f64..1.0,
    ) {
        let t = Tensor::from_vec(Shape::new(1, 4, 1, 1), vals).unwrap();
        let weight = Param::new(t.clone(), ParamKind::Weight);
        let no_decay = Param::new(t.clone(), ParamKind::NoDecay);
        let buffer = Param::new(t.clone(), ParamKind::Buffer);
        let params = vec![("w".into(), weight.clone()), ("s".into(), no_decay.clone()), ("b".into(), buffer.clone())];
        let mut sgd = Sgd::new(0.9, wd);
        for _ in 0..3 {
            sgd.step(&params, lr).unwrap();
        }
        prop_assert_eq!(no_decay.value(), t.clone());
        prop_assert_eq!(buffer.value(), t.clone());
        if t.data().iter().any(|&v| v != 0.0) {
            prop_assert_ne!(weight.value(), t.clone());
        }
    }

    #[test]
    fn dilation_widens_receptive_field(
        stack in prop::collection::vec((prop_oneof![Just(3usize), Just(5)], 1usize..3), 1..6),
        k in 2usize..6,
    ) {
        let base = LayerSpec::new(stack.iter().map(|&(kn, s)| Layer::new(kn, s, 1)).collect()).unwrap();
        let wide = LayerSpec::new(stack.iter().map(|&(kn, s)| Layer::new(kn, s, k)).collect()).unwrap();
        prop_assert!(receptive_field(&wide).0 > receptive_field(&base).0);
        prop_assert_eq!(LayerSpec::parse(&base.to_string()).unwrap(), base);
    }

    #[test]
    fn netpbm_round_trips(h in 1usize..10, w in 1usize..10, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng).map(|v| (v * 255.0).round() / 255.0);
        let bytes = encode_ppm(&q).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(&back, &q);
        prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
        let g = Gray { width: w, height: h, pixels: q.data()[..h * w].iter().map(|v| (v * 255.0) as u8).collect() };
        let pgm = encode_pgm(&g).unwrap();
        prop_assert_eq!(decode_pgm(&pgm).unwrap(), g);
    }

    #[test]
    fn config_parsing_is_total(text in "[\\[\\]a-z_=#0-9. \n]{0,80}") {
        let _ = Config::parse(&text);
    }

    #[test]
    fn confusion_counts_every_labelled_pixel(lm in label_map(12, 4), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<u8> = Tensor::uniform(Shape::new(1, 1, 1, lm.ids().len()), 0.0, 4.0, &mut rng)
            .data()
            .iter()
            .map(|v| *v as u8)
            .collect();
        let mut c = Confusion::new(4);
        c.add(&lm, &pred, None).unwrap();
        let labelled = lm.ids().iter().filter(|&&id| id != 255).count() as u64;
        prop_assert_eq!(c.total(), labelled);
    }
}

#[test]
fn generation_is_reproducible() {
    let cfg = SceneConfig {
        seed: 77,
        ..SceneConfig::default()
    };
    let bytes = |samples: &[SegSample]| -> Vec<u8> {
        samples
            .iter()
            .flat_map(|s| {
                let mut b = encode_ppm(&s.image).unwrap();
                b.extend_from_slice(s.labels.ids());
                b
            })
            .collect()
    };
    let a = generate(&cfg, 6).unwrap();
    assert_eq!(bytes(&a), bytes(&generate(&cfg, 6).unwrap()));
    // Sample i does not depend on how many samples were requested.
    assert_eq!(bytes(&a[..3]), bytes(&generate(&cfg, 3).unwrap()));
    let other = generate(&SceneConfig { seed: 78, ..cfg }, 6).unwrap();
    assert_ne!(bytes(&a), bytes(&other));
    let ids: BTreeSet<u8> = a.iter().flat_map(|s| s.labels.distinct_ids()).collect();
    assert!(ids.len() >= 3);
}
