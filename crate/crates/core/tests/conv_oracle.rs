//! conv2d against a nested-loop reference, plus the impulse and
//! zero-inflated-kernel identities.

use mrfseg::tensor::{conv2d_tensor, ConvParams, Param, ParamKind, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let [n, cin, h, wd] = x.shape().dims();
    let [cout, cpg, kh, kw] = w.shape().dims();
    let opg = cout / groups;
    let oh = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    assert_eq!(cpg * groups, cin);
    let mut out = Tensor::zeros(Shape::new(n, cout, oh, ow));
    for bi in 0..n {
        for co in 0..cout {
            let g = co / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cpg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(co, ci, ky, kx)
                                    * x.at(bi, g * cpg + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(bi, co, oy, ox) = acc;
                }
            }
        }
    }
    out
}

pub fn thirty_cases_cover_every_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut combos = Vec::new();
    for stride in [1, 2] {
        for dilation in [1, 2, 4] {
            for depthwise in [false, true] {
                combos.push((stride, dilation, depthwise));
            }
        }
    }
    for case in 0..30 {
        let (stride, dilation, depthwise) = combos[case % combos.len()];
        let c = rng.gen_range(1..=4);
        let cout = if depthwise { c } else { rng.gen_range(1..=5) };
        let groups = if depthwise { c } else { 1 };
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let pad = rng.gen_range(0..=dilation * (k - 1) / 2 + 1);
        let min = dilation * (k - 1) + 1;
        let h = rng.gen_range(min.max(3)..=min + 8);
        let w = rng.gen_range(min.max(3)..=min + 8);
        let n = rng.gen_range(1..=2);
        let x = Tensor::randn(Shape::new(n, c, h, w), 1.0, &mut rng);
        let wt = Tensor::randn(Shape::new(cout, c / groups, k, k), 1.0, &mut rng);
        let bias = rng
            .gen_bool(0.5)
            .then(|| Tensor::randn(Shape::new(1, cout, 1, 1), 1.0, &mut rng));

        let expected = naive_conv(&x, &wt, bias.as_ref(), stride, dilation, pad, groups);
        let direct = conv2d_tensor(&x, &wt, bias.as_ref(), stride, dilation, pad, groups).unwrap();
        assert_eq!(direct.shape(), expected.shape(), "case {case}");
        assert!(
            direct.max_abs_diff(&expected) <= 1e-10,
            "case {case}: {}",
            direct.max_abs_diff(&expected)
        );

        let params = ConvParams::new(
            Param::new(wt.clone(), ParamKind::Weight),
            bias.clone().map(|b| Param::new(b, ParamKind::Weight)),
            stride,
            dilation,
            pad,
            groups,
        )
        .unwrap();
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = tape.conv2d(xv, &params).unwrap();
        assert!(
            tape.value(y).max_abs_diff(&expected) <= 1e-10,
            "tape case {case}"
        );
    }
}

pub fn impulse_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [1, 3, 5, 7] {
        let x = Tensor::randn(Shape::new(2, 3, 9, 11), 1.0, &mut rng);
        let mut w = Tensor::zeros(Shape::new(3, 3, k, k));
        for c in 0..3 {
            *w.at_mut(c, c, k / 2, k / 2) = 1.0;
        }
        let y = conv2d_tensor(&x, &w, None, 1, 1, k / 2, 1).unwrap();
        assert_eq!(y, x);
    }
}

pub fn dilation_equals_zero_inflated_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for r in 1..=4 {
        for stride in [1, 2] {
            let x = Tensor::randn(Shape::new(1, 2, 17, 15), 1.0, &mut rng);
            let w = Tensor::randn(Shape::new(3, 2, 3, 3), 1.0, &mut rng);
            let ke = 2 * r + 1;
            let mut inflated = Tensor::zeros(Shape::new(3, 2, ke, ke));
            for o in 0..3 {
                for i in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            *inflated.at_mut(o, i, ky * r, kx * r) = w.at(o, i, ky, kx);
                        }
                    }
                }
            }
            let a = conv2d_tensor(&x, &w, None, stride, r, r, 1).unwrap();
            let b = conv2d_tensor(&x, &inflated, None, stride, 1, r, 1).unwrap();
            assert_eq!(a.shape(), b.shape());
            assert!(a.max_abs_diff(&b) <= 1e-12, "r={r} s={stride}");
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn thirty_cases_cover_every_geometry() {
        super::thirty_cases_cover_every_geometry()
    }
    #[test]
    fn impulse_kernel_is_identity() {
        super::impulse_kernel_is_identity()
    }
    #[test]
    fn dilation_equals_zero_inflated_kernel() {
        super::dilation_equals_zero_inflated_kernel()
    }
}
