//! Path-mixing, weight-sharing and pruning contracts of the MRFM block.

use mrfseg::mrfm::{
    make_mrfm_lite, receptive_field, remove_atrous_path, set_norm_mode, BasicModule, Layer,
    LayerSpec, MrfmState,
};
use mrfseg::tensor::{BnMode, Param, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn set_logits(s: &MrfmState, a: f64, b: f64) {
    s.logits
        .set_value(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![a, b]).unwrap());
}

fn run_module(m: &BasicModule, x: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = m.forward(&mut tape, xv).unwrap();
    tape.value(y).clone()
}

fn run_mrfm(s: &MrfmState, x: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = s.forward(&mut tape, xv).unwrap();
    tape.value(y).clone()
}

/// Gives every normalization non-trivial running statistics and affine
/// parameters so eval-mode outputs are not a plain pass-through.
fn randomize_norms(s: &MrfmState, seed: u64) {
    let mut r = rng(seed);
    for bn in s.batch_norms() {
        let sh = bn.scale.shape();
        bn.scale.set_value(Tensor::uniform(sh, 0.5, 1.5, &mut r));
        bn.shift.set_value(Tensor::randn(sh, 0.2, &mut r));
        bn.running_mean.set_value(Tensor::randn(sh, 0.2, &mut r));
        bn.running_var
            .set_value(Tensor::uniform(sh, 0.5, 2.0, &mut r));
    }
}

fn modules(seed: u64) -> Vec<(MrfmState, Tensor)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (cin, cout, stride, k) in [(4, 4, 1, 2), (3, 5, 1, 4), (4, 6, 2, 2), (2, 2, 1, 3)] {
        let template = BasicModule::new(cin, cout, stride, 1, &mut r).unwrap();
        let s = MrfmState::standard(template, k, &mut r).unwrap();
        randomize_norms(&s, seed + k as u64);
        let x = Tensor::randn(Shape::new(2, cin, 12, 12), 1.0, &mut r);
        out.push((s, x));
    }
    out
}

pub fn zero_logits_average_the_two_paths() {
    for mode in [BnMode::Train, BnMode::Eval] {
        for (s, x) in modules(1) {
            set_norm_mode(&s.batch_norms(), mode);
            set_logits(&s, 0.0, 0.0);
            let y = run_mrfm(&s, &x);
            let f = run_module(&s.standard, &x);
            let g = run_module(&s.atrous, &x);
            let expected = Tensor::from_vec(
                f.shape(),
                f.data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| 0.5 * a + 0.5 * b)
                    .collect(),
            )
            .unwrap();
            assert!(
                y.max_abs_diff(&expected) <= 1e-12,
                "{mode:?}: {}",
                y.max_abs_diff(&expected)
            );
        }
    }
}

pub fn saturated_logits_select_the_standard_path() {
    for (s, x) in modules(2) {
        set_norm_mode(&s.batch_norms(), BnMode::Eval);
        let f = run_module(&s.standard, &x);
        let mut last = f64::INFINITY;
        for gap in [0.0, 1.0, 4.0, 10.0, 25.0, 40.0, 60.0, 200.0] {
            set_logits(&s, gap / 2.0, -gap / 2.0);
            let d = run_mrfm(&s, &x).max_abs_diff(&f);
            assert!(d <= last, "gap {gap}: {d} > {last}");
            last = d;
        }
        assert!(last <= 1e-10, "{last}");
    }
}

pub fn path_weights_sum_to_one() {
    let mut r = rng(3);
    let (s, _) = modules(3).remove(0);
    for _ in 0..1000 {
        let scale = 10f64.powf(r.gen_range(-3.0..3.0));
        let (a, b) = (
            r.gen_range(-1.0..1.0) * scale,
            r.gen_range(-1.0..1.0) * scale,
        );
        set_logits(&s, a, b);
        let [w1, w2] = s.path_weights();
        assert!((w1 + w2 - 1.0).abs() <= f64::EPSILON, "{a} {b}");
        if (a - b).abs() < 700.0 {
            assert!(w1 > 0.0 && w2 > 0.0);
        }
    }
}

fn grads_by_name(params: &[(String, Param)]) -> Vec<(String, Tensor)> {
    params
        .iter()
        .filter(|(_, p)| p.is_trainable())
        .map(|(n, p)| {
            (
                n.clone(),
                p.grad().unwrap_or_else(|| Tensor::zeros(p.shape())),
            )
        })
        .collect()
}

fn backward(s: &MrfmState, x: &Tensor, seed: u64) -> Tensor {
    for (_, p) in s.named_params("m") {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = s.forward(&mut tape, xv).unwrap();
    let r = Tensor::randn(tape.shape(y), 1.0, &mut rng(seed));
    let rv = tape.constant(r);
    let p = tape.mul(y, rv).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    tape.value(y).clone()
}

pub fn shared_storage_matches_two_equal_copies() {
    let mut r = rng(4);
    for (cin, cout, stride, k) in [(4, 4, 1, 2), (3, 6, 2, 2), (5, 5, 1, 4)] {
        let template = BasicModule::new(cin, cout, stride, 1, &mut r).unwrap();
        let lite = make_mrfm_lite(template, k).unwrap();
        set_logits(&lite, 0.3, -0.2);
        randomize_norms(&lite, 40 + k as u64);
        let twin = lite.unshared_twin();
        let x = Tensor::randn(Shape::new(2, cin, 12, 12), 1.0, &mut r);

        for mode in [BnMode::Eval, BnMode::Train] {
            set_norm_mode(&lite.batch_norms(), mode);
            set_norm_mode(&twin.batch_norms(), mode);
            let ys = backward(&lite, &x, 9);
            let yt = backward(&twin, &x, 9);
            assert_eq!(ys.data(), yt.data(), "forward, {mode:?}");

            let shared = grads_by_name(&lite.named_params("m"));
            let copies = grads_by_name(&twin.named_params("m"));
            for (name, g) in &shared {
                if name == "m.logits" {
                    let t = &copies.iter().find(|(n, _)| n == name).unwrap().1;
                    assert!(g.max_abs_diff(t) <= 1e-10);
                    continue;
                }
                let suffix = name.strip_prefix("m.shared.").unwrap();
                let a = &copies
                    .iter()
                    .find(|(n, _)| *n == format!("m.standard.{suffix}"))
                    .unwrap()
                    .1;
                let b = &copies
                    .iter()
                    .find(|(n, _)| *n == format!("m.atrous.{suffix}"))
                    .unwrap()
                    .1;
                let mut sum = a.clone();
                sum.add_assign(b);
                assert!(
                    g.max_abs_diff(&sum) <= 1e-10,
                    "{name} {mode:?}: {}",
                    g.max_abs_diff(&sum)
                );
            }
        }
    }
}

pub fn pruned_module_is_stable_under_rewrapping() {
    let mut r = rng(5);
    let template = BasicModule::new(4, 4, 1, 1, &mut r).unwrap();
    let lite = make_mrfm_lite(template, 2).unwrap();
    randomize_norms(&lite, 50);
    set_norm_mode(&lite.batch_norms(), BnMode::Eval);
    let x = Tensor::randn(Shape::new(1, 4, 10, 10), 1.0, &mut r);
    let once = remove_atrous_path(&lite).unwrap();
    let y1 = run_module(&once, &x);
    let rewrapped = make_mrfm_lite(once.clone(), 2).unwrap();
    set_logits(&rewrapped, 5.0, -1.0);
    let twice = remove_atrous_path(&rewrapped).unwrap();
    assert_eq!(run_module(&twice, &x).data(), y1.data());
    assert!(remove_atrous_path(&MrfmState::standard(once, 2, &mut r).unwrap()).is_err());
}

pub fn atrous_paths_see_further() {
    for k in 2..=6 {
        let base = LayerSpec::new(vec![
            Layer::new(3, 2, 1),
            Layer::new(3, 1, 1),
            Layer::new(3, 1, 1),
        ])
        .unwrap();
        let wide = LayerSpec::new(vec![
            Layer::new(3, 2, 1),
            Layer::new(3, 1, k),
            Layer::new(3, 1, k),
        ])
        .unwrap();
        assert!(receptive_field(&wide).0 > receptive_field(&base).0);
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn zero_logits_average_the_two_paths() {
        super::zero_logits_average_the_two_paths()
    }
    #[test]
    fn saturated_logits_select_the_standard_path() {
        super::saturated_logits_select_the_standard_path()
    }
    #[test]
    fn path_weights_sum_to_one() {
        super::path_weights_sum_to_one()
    }
    #[test]
    fn shared_storage_matches_two_equal_copies() {
        super::shared_storage_matches_two_equal_copies()
    }
    #[test]
    fn pruned_module_is_stable_under_rewrapping() {
        super::pruned_module_is_stable_under_rewrapping()
    }
    #[test]
    fn atrous_paths_see_further() {
        super::atrous_paths_see_further()
    }
}
