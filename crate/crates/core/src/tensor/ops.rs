use super::tape::{Backward, BackwardCtx};
use super::{Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Bilinear resampling
// ---------------------------------------------------------------------------

/// Per output index: two source indices and the weight of the second.
///
/// Pixel centers sit at half-pixel offsets (align-corners = false). Near the
/// borders of an upsampled axis the source coordinate falls outside the
/// outermost centers; the value is then extrapolated linearly from the two
/// nearest samples instead of clamped, so that mean-pooling an upsampled
/// image by the same integer factor recovers the original exactly.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    if in_len == 1 {
        return vec![(0, 0, 0.0); out_len];
    }
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0 = (src.floor().max(0.0) as usize).min(in_len - 2);
            (i0, i0 + 1, src - i0 as f64)
        })
        .collect()
}

fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape().dims();
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for &(y0, y1, ly) in &ty {
            let r0 = &data[base + y0 * w..base + y0 * w + w];
            let r1 = &data[base + y1 * w..base + y1 * w + w];
            for &(x0, x1, lx) in &tx {
                let top = (1.0 - lx) * r0[x0] + lx * r0[x1];
                let bottom = (1.0 - lx) * r1[x0] + lx * r1[x1];
                out.push((1.0 - ly) * top + ly * bottom);
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, out_h, out_w), out).expect("bilinear shape")
}

/// Tape-free bilinear resize (align-corners = false, see [`Tape::bilinear_resize`]).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::ZeroExtent {
            op: "bilinear_resize",
            detail: format!("target {out_h}×{out_w}"),
        });
    }
    Ok(bilinear_forward(x, out_h, out_w))
}

struct BilinearOp {
    input: Var,
}

impl Backward for BilinearOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let in_shape = ctx.value(self.input).shape();
        let [n, c, h, w] = in_shape.dims();
        let [_, _, out_h, out_w] = grad.shape().dims();
        let ty = axis_taps(h, out_h);
        let tx = axis_taps(w, out_w);
        let mut dx = vec![0.0; in_shape.numel()];
        let dy = grad.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            let obase = plane * out_h * out_w;
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let g = dy[obase + oy * out_w + ox];
                    dx[base + y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * g;
                    dx[base + y0 * w + x1] += (1.0 - ly) * lx * g;
                    dx[base + y1 * w + x0] += ly * (1.0 - lx) * g;
                    dx[base + y1 * w + x1] += ly * lx * g;
                }
            }
        }
        Ok(vec![Some(Tensor::from_vec(in_shape, dx)?)])
    }
}

// ---------------------------------------------------------------------------
// Padding and cropping (evaluation helpers, no gradient)
// ---------------------------------------------------------------------------

fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Extends the bottom and right borders by mirror reflection (edge pixel not
/// repeated).
pub fn reflect_pad(x: &Tensor, pad_bottom: usize, pad_right: usize) -> Tensor {
    let [n, c, h, w] = x.shape().dims();
    let (oh, ow) = (h + pad_bottom, w + pad_right);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            let sy = reflect_index(y, h);
            for xx in 0..ow {
                out.push(x.data()[base + sy * w + reflect_index(xx, w)]);
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, oh, ow), out).expect("reflect_pad shape")
}

/// Top-left `h × w` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, xh, xw] = x.shape().dims();
    if h > xh || w > xw || h == 0 || w == 0 {
        return Err(Error::shape(
            "crop",
            format!("cannot crop {h}×{w} from {}", x.shape()),
        ));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        let base = plane * xh * xw;
        for y in 0..h {
            out.extend_from_slice(&x.data()[base + y * xw..base + y * xw + w]);
        }
    }
    Tensor::from_vec(Shape::new(n, c, h, w), out)
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

struct ReluOp {
    input: Var,
}

impl Backward for ReluOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.value(self.input);
        let dx = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect();
        Ok(vec![Some(Tensor::from_vec(x.shape(), dx)?)])
    }
}

struct AddOp {
    a: Var,
    b: Var,
}

impl Backward for AddOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, _ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone()), Some(grad.clone())])
    }
}

struct MulOp {
    a: Var,
    b: Var,
}

impl Backward for MulOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.value(self.a), ctx.value(self.b));
        let times = |t: &Tensor| {
            let data = t
                .data()
                .iter()
                .zip(grad.data())
                .map(|(x, g)| x * g)
                .collect();
            Tensor::from_vec(t.shape(), data)
        };
        Ok(vec![Some(times(b)?), Some(times(a)?)])
    }
}

struct ScalarMulOp {
    input: Var,
    factor: f64,
}

impl Backward for ScalarMulOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.map(|g| g * self.factor))])
    }
}

struct ScaleByOp {
    input: Var,
    scalars: Var,
    index: usize,
}

impl Backward for ScaleByOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input, self.scalars]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let s = ctx.value(self.scalars);
        let x = ctx.value(self.input);
        let factor = s.data()[self.index];
        let dx = ctx.needs_grad(self.input).then(|| grad.map(|g| g * factor));
        let ds = ctx.needs_grad(self.scalars).then(|| {
            let mut ds = Tensor::zeros(s.shape());
            ds.data_mut()[self.index] = x.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum();
            ds
        });
        Ok(vec![dx, ds])
    }
}

struct SoftmaxOp {
    input: Var,
}

impl Backward for SoftmaxOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let y = ctx.output();
        let shape = y.shape();
        let [n, c, _, _] = shape.dims();
        let plane = shape.plane();
        let mut dx = vec![0.0; shape.numel()];
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let dot: f64 = (0..c)
                    .map(|ch| y.data()[idx(ch)] * grad.data()[idx(ch)])
                    .sum();
                for ch in 0..c {
                    dx[idx(ch)] = y.data()[idx(ch)] * (grad.data()[idx(ch)] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::from_vec(shape, dx)?)])
    }
}

struct ConcatOp {
    inputs: Vec<Var>,
    channels: Vec<usize>,
}

impl Backward for ConcatOp {
    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }

    fn backward(&self, _ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let [n, total, h, w] = grad.shape().dims();
        let plane = h * w;
        let mut out = Vec::with_capacity(self.inputs.len());
        let mut start = 0;
        for &ch in &self.channels {
            let mut d = Vec::with_capacity(n * ch * plane);
            for b in 0..n {
                let base = (b * total + start) * plane;
                d.extend_from_slice(&grad.data()[base..base + ch * plane]);
            }
            out.push(Some(Tensor::from_vec(Shape::new(n, ch, h, w), d)?));
            start += ch;
        }
        Ok(out)
    }
}

struct GlobalAvgPoolOp {
    input: Var,
}

impl Backward for GlobalAvgPoolOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let shape = ctx.value(self.input).shape();
        let plane = shape.plane();
        let mut dx = Vec::with_capacity(shape.numel());
        for &g in grad.data() {
            dx.extend(std::iter::repeat_n(g / plane as f64, plane));
        }
        Ok(vec![Some(Tensor::from_vec(shape, dx)?)])
    }
}

struct SumOp {
    input: Var,
}

impl Backward for SumOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let shape = ctx.value(self.input).shape();
        Ok(vec![Some(Tensor::full(shape, grad.item()))])
    }
}

impl Tape {
    /// `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let input = self.value(x).clone();
        if self.grad_enabled() {
            self.record_relu_pattern(&input);
        }
        let value = input.map(|v| v.max(0.0));
        self.push(value, Box::new(ReluOp { input: x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("{sa} vs {sb}")));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Box::new(AddOp { a, b })))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", format!("{sa} vs {sb}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(sa, data)?;
        Ok(self.push(value, Box::new(MulOp { a, b })))
    }

    pub fn scalar_mul(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Box::new(ScalarMulOp { input: x, factor }))
    }

    /// Multiplies every element of `x` by entry `index` of `scalars`.
    pub fn scale_by(&mut self, x: Var, scalars: Var, index: usize) -> Result<Var> {
        let len = self.shape(scalars).numel();
        if index >= len {
            return Err(Error::shape(
                "scale_by",
                format!("index {index} into {len} scalars"),
            ));
        }
        let factor = self.value(scalars).data()[index];
        let value = self.value(x).map(|v| v * factor);
        Ok(self.push(
            value,
            Box::new(ScaleByOp {
                input: x,
                scalars,
                index,
            }),
        ))
    }

    /// Softmax across the channel axis at every (batch, pixel).
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let shape = t.shape();
        let [n, c, _, _] = shape.dims();
        let plane = shape.plane();
        let mut out = vec![0.0; shape.numel()];
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let max = (0..c)
                    .map(|ch| t.data()[idx(ch)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for ch in 0..c {
                    let e = (t.data()[idx(ch)] - max).exp();
                    out[idx(ch)] = e;
                    total += e;
                }
                for ch in 0..c {
                    out[idx(ch)] /= total;
                }
            }
        }
        let value = Tensor::from_vec(shape, out).expect("softmax shape");
        self.push(value, Box::new(SoftmaxOp { input: x }))
    }

    pub fn channel_concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("channel_concat", "no inputs"))?;
        let [n, _, h, w] = self.shape(first).dims();
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vn, vc, vh, vw] = self.shape(v).dims();
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "channel_concat",
                    format!("{} vs {}", self.shape(v), self.shape(first)),
                ));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&v, &ch) in inputs.iter().zip(&channels) {
                let base = b * ch * plane;
                data.extend_from_slice(&self.value(v).data()[base..base + ch * plane]);
            }
        }
        let value = Tensor::from_vec(Shape::new(n, total, h, w), data)?;
        Ok(self.push(
            value,
            Box::new(ConcatOp {
                inputs: inputs.to_vec(),
                channels,
            }),
        ))
    }

    /// Mean over each channel plane: `N×C×H×W → N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, _, _] = t.shape().dims();
        let plane = t.shape().plane();
        let data = t
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::from_vec(Shape::new(n, c, 1, 1), data).expect("pool shape");
        self.push(value, Box::new(GlobalAvgPoolOp { input: x }))
    }

    /// Bilinear resize with half-pixel centers (align-corners = false) and
    /// linear extrapolation at upsampled borders.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = resize_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(value, Box::new(BilinearOp { input: x })))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Box::new(SumOp { input: x }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap(),
            true,
        );
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::full(Shape::new(2, 3, 5, 7), 0.25);
        for (h, w) in [(1, 1), (3, 2), (10, 14), (13, 4)] {
            let y = resize_bilinear(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn bilinear_upsample_then_mean_pool_recovers_input() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = resize_bilinear(&x, 4, 4).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mean = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| y.at(0, 0, 2 * oy + dy, 2 * ox + dx))
                    .sum::<f64>()
                    / 4.0;
                assert!((mean - x.at(0, 0, oy, ox)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_edge() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let y = reflect_pad(&x, 0, 4);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0]);
        let back = crop(&y, 1, 3).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn concat_and_pool_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(Shape::new(2, 1, 2, 2), 1.0), true);
        let b = tape.leaf(Tensor::full(Shape::new(2, 3, 2, 2), 2.0), true);
        let c = tape.channel_concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), Shape::new(2, 4, 2, 2));
        assert_eq!(tape.value(c).at(1, 0, 1, 1), 1.0);
        assert_eq!(tape.value(c).at(1, 3, 0, 0), 2.0);
        let p = tape.global_avg_pool(c);
        assert_eq!(tape.shape(p), Shape::new(2, 4, 1, 1));
        let bad = tape.leaf(Tensor::zeros(Shape::new(2, 1, 3, 2)), false);
        assert!(tape.channel_concat(&[a, bad]).is_err());
    }
}
