use std::cell::Cell;

use rand::Rng;

use super::tape::{Backward, BackwardCtx};
use super::{Param, ParamKind, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weights and geometry of one (possibly grouped, strided, dilated) 2-D
/// convolution. Padding is always zero padding.
#[derive(Clone, Debug)]
pub struct ConvParams {
    /// `out_channels × in_channels/groups × kH × kW`
    pub weight: Param,
    /// `1 × out_channels × 1 × 1`
    pub bias: Option<Param>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(
        weight: Param,
        bias: Option<Param>,
        stride: usize,
        dilation: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::config(format!(
                "conv stride ({stride}), dilation ({dilation}) and groups ({groups}) must be >= 1"
            )));
        }
        let ws = weight.shape();
        if !ws.n().is_multiple_of(groups) {
            return Err(Error::shape(
                "conv2d",
                format!("out channels {} not divisible by groups {groups}", ws.n()),
            ));
        }
        if let Some(b) = &bias {
            if b.shape() != Shape::new(1, ws.n(), 1, 1) {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {} for {} out channels", b.shape(), ws.n()),
                ));
            }
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            dilation,
            padding,
            groups,
        })
    }

    /// Fan-in scaled Gaussian initialization with "same" padding for odd
    /// kernels (`padding = dilation·(k−1)/2`).
    #[allow(clippy::too_many_arguments)]
    pub fn kaiming<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        let per_group = in_channels / groups;
        let fan_in = (per_group * kernel * kernel) as f64;
        let shape = Shape::new(out_channels, per_group, kernel, kernel);
        let weight = Param::new(
            Tensor::randn(shape, (2.0 / fan_in).sqrt(), rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            Param::new(
                Tensor::zeros(Shape::new(1, out_channels, 1, 1)),
                ParamKind::Weight,
            )
        });
        ConvParams {
            weight,
            bias,
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c() * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h(), s.w())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    /// Same weights (shared storage), different dilation; padding is
    /// recomputed to keep "same" output extents.
    pub fn with_dilation(&self, dilation: usize) -> Self {
        let (kh, _) = self.kernel();
        ConvParams {
            dilation,
            padding: dilation * (kh - 1) / 2,
            ..self.clone()
        }
    }

    pub fn deep_clone(&self) -> Self {
        ConvParams {
            weight: self.weight.deep_clone(),
            bias: self.bias.as_ref().map(Param::deep_clone),
            ..self.clone()
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .collect()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        Geometry::new(
            input,
            self.weight.shape(),
            self.stride,
            self.dilation,
            self.padding,
            self.groups,
        )
        .map(|g| g.output_shape())
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(
        input: Shape,
        weight: Shape,
        stride: usize,
        dilation: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = input.dims();
        let [cout, cg, kh, kw] = weight.dims();
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::config(
                "conv stride, dilation and groups must be >= 1",
            ));
        }
        if cin != cg * groups {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} != weight in-channels {cg} × groups {groups}"),
            ));
        }
        if cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output channels {cout} not divisible by groups {groups}"),
            ));
        }
        let eff_h = (kh - 1) * dilation + 1;
        let eff_w = (kw - 1) * dilation + 1;
        if eff_h > h + 2 * padding {
            return Err(Error::ZeroExtent {
                op: "conv2d",
                detail: format!(
                    "height: effective kernel {eff_h} exceeds padded input {}",
                    h + 2 * padding
                ),
            });
        }
        if eff_w > w + 2 * padding {
            return Err(Error::ZeroExtent {
                op: "conv2d",
                detail: format!(
                    "width: effective kernel {eff_w} exceeds padded input {}",
                    w + 2 * padding
                ),
            });
        }
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            dilation,
            padding,
            groups,
            ho: (h + 2 * padding - eff_h) / stride + 1,
            wo: (w + 2 * padding - eff_w) / stride + 1,
        })
    }

    fn output_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.ho, self.wo)
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.groups == self.cout
    }

    fn tap_offset_y(&self, ki: usize) -> isize {
        (ki * self.dilation) as isize - self.padding as isize
    }

    fn tap_offset_x(&self, kj: usize) -> isize {
        (kj * self.dilation) as isize - self.padding as isize
    }
}

/// Output indices `o` in `[lo, hi)` for which `o·stride + offset` lands
/// inside `[0, in_len)`.
fn tap_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let lo = if offset >= 0 {
        0
    } else {
        (-offset + s - 1) / s
    };
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// `C = A·B + beta·C` over strided views, bounds-checked before the call.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(
            (m - 1) * rsa + (k - 1) * csa < a.len(),
            "gemm: A out of bounds"
        );
        assert!(
            (k - 1) * rsb + (n - 1) * csb < b.len(),
            "gemm: B out of bounds"
        );
    }
    assert!(
        (m - 1) * rsc + (n - 1) * csc < c.len(),
        "gemm: C out of bounds"
    );
    // SAFETY: every index touched is below the slice lengths asserted above,
    // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

thread_local! {
    static COL_BUF: Cell<Vec<f64>> = const { Cell::new(Vec::new()) };
}

/// Runs `f` on this thread's column buffer, grown to at least `len`.
/// Contents are stale; callers overwrite every entry they read.
fn with_col<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = COL_BUF.take();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let out = f(&mut buf[..len]);
    COL_BUF.set(buf);
    out
}

/// Unfolds one group of the input into a `(Cg·kH·kW) × (N·Ho·Wo)` matrix.
/// Every entry of `col` is written, so it needs no prior clearing.
fn im2col(x: &[f64], g: &Geometry, group: usize, col: &mut [f64]) {
    let p_out = g.plane_out();
    let q = g.n * p_out;
    for cg in 0..g.cin_g() {
        let c = group * g.cin_g() + cg;
        for ki in 0..g.kh {
            let off_y = g.tap_offset_y(ki);
            let (oy0, oy1) = tap_range(off_y, g.stride, g.h, g.ho);
            for kj in 0..g.kw {
                let off_x = g.tap_offset_x(kj);
                let (ox0, ox1) = tap_range(off_x, g.stride, g.w, g.wo);
                let row = (cg * g.kh + ki) * g.kw + kj;
                for n in 0..g.n {
                    let base_in = (n * g.cin + c) * g.h * g.w;
                    let plane = &mut col[row * q + n * p_out..row * q + (n + 1) * p_out];
                    plane[..oy0 * g.wo].fill(0.0);
                    plane[oy1.max(oy0) * g.wo..].fill(0.0);
                    for oy in oy0..oy1 {
                        let iy = (oy * g.stride) as isize + off_y;
                        let src = base_in + iy as usize * g.w;
                        let dst = &mut plane[oy * g.wo..(oy + 1) * g.wo];
                        dst[..ox0].fill(0.0);
                        dst[ox1.max(ox0)..].fill(0.0);
                        if ox1 > ox0 {
                            let start = src + ((ox0 * g.stride) as isize + off_x) as usize;
                            copy_taps(&x[start..], g.stride, &mut dst[ox0..ox1]);
                        }
                    }
                }
            }
        }
    }
}

/// `dst[i] = src[i·stride]`.
fn copy_taps(src: &[f64], stride: usize, dst: &mut [f64]) {
    if stride == 1 {
        dst.copy_from_slice(&src[..dst.len()]);
    } else {
        for (d, s) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *d = *s;
        }
    }
}

/// `dst[i·stride] += scale · src[i]`.
fn scatter_taps(src: &[f64], scale: f64, stride: usize, dst: &mut [f64]) {
    if stride == 1 {
        for (d, s) in dst[..src.len()].iter_mut().zip(src) {
            *d += scale * s;
        }
    } else {
        for (d, s) in dst.iter_mut().step_by(stride).zip(src) {
            *d += scale * s;
        }
    }
}

/// `dst[i] += scale · src[i·stride]`.
fn gather_taps(src: &[f64], scale: f64, stride: usize, dst: &mut [f64]) {
    if stride == 1 {
        let src = &src[..dst.len()];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += scale * s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *d += scale * s;
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the input grid.
fn col2im(col: &[f64], g: &Geometry, group: usize, dx: &mut [f64]) {
    let p_out = g.plane_out();
    let q = g.n * p_out;
    for cg in 0..g.cin_g() {
        let c = group * g.cin_g() + cg;
        for ki in 0..g.kh {
            let off_y = g.tap_offset_y(ki);
            let (oy0, oy1) = tap_range(off_y, g.stride, g.h, g.ho);
            for kj in 0..g.kw {
                let off_x = g.tap_offset_x(kj);
                let (ox0, ox1) = tap_range(off_x, g.stride, g.w, g.wo);
                let row = (cg * g.kh + ki) * g.kw + kj;
                for n in 0..g.n {
                    let base_in = (n * g.cin + c) * g.h * g.w;
                    let base_col = row * q + n * p_out;
                    if ox1 <= ox0 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = (oy * g.stride) as isize + off_y;
                        let dst = base_in + iy as usize * g.w;
                        let start = dst + ((ox0 * g.stride) as isize + off_x) as usize;
                        let src = base_col + oy * g.wo;
                        scatter_taps(&col[src + ox0..src + ox1], 1.0, g.stride, &mut dx[start..]);
                    }
                }
            }
        }
    }
}

fn forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Geometry) -> Vec<f64> {
    let p_out = g.plane_out();
    let mut out = vec![0.0; g.n * g.cout * p_out];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else if g.is_pointwise() {
        for n in 0..g.n {
            gemm(
                g.cout,
                g.cin,
                p_out,
                w,
                g.cin,
                1,
                &x[n * g.cin * p_out..],
                p_out,
                1,
                0.0,
                &mut out[n * g.cout * p_out..],
                p_out,
                1,
            );
        }
    } else {
        let r = g.cin_g() * g.kh * g.kw;
        let q = g.n * p_out;
        with_col(r * q, |col| {
            for group in 0..g.groups {
                im2col(x, g, group, col);
                for n in 0..g.n {
                    gemm(
                        g.cout_g(),
                        r,
                        p_out,
                        &w[group * g.cout_g() * r..],
                        r,
                        1,
                        &col[n * p_out..],
                        q,
                        1,
                        0.0,
                        &mut out[(n * g.cout + group * g.cout_g()) * p_out..],
                        p_out,
                        1,
                    );
                }
            }
        });
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for (o, &bo) in b.iter().enumerate() {
                let base = (n * g.cout + o) * p_out;
                for v in &mut out[base..base + p_out] {
                    *v += bo;
                }
            }
        }
    }
    out
}

fn depthwise_forward(x: &[f64], w: &[f64], g: &Geometry, out: &mut [f64]) {
    let p_out = g.plane_out();
    for n in 0..g.n {
        for c in 0..g.cin {
            let base_in = (n * g.cin + c) * g.h * g.w;
            let base_out = (n * g.cout + c) * p_out;
            for ki in 0..g.kh {
                let off_y = g.tap_offset_y(ki);
                let (oy0, oy1) = tap_range(off_y, g.stride, g.h, g.ho);
                for kj in 0..g.kw {
                    let off_x = g.tap_offset_x(kj);
                    let (ox0, ox1) = tap_range(off_x, g.stride, g.w, g.wo);
                    if ox1 <= ox0 {
                        continue;
                    }
                    let wv = w[(c * g.kh + ki) * g.kw + kj];
                    for oy in oy0..oy1 {
                        let iy = ((oy * g.stride) as isize + off_y) as usize;
                        let src = base_in + iy * g.w + ((ox0 * g.stride) as isize + off_x) as usize;
                        let dst = base_out + oy * g.wo;
                        gather_taps(&x[src..], wv, g.stride, &mut out[dst + ox0..dst + ox1]);
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &Geometry,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let p_out = g.plane_out();
    for n in 0..g.n {
        for c in 0..g.cin {
            let base_in = (n * g.cin + c) * g.h * g.w;
            let base_out = (n * g.cout + c) * p_out;
            for ki in 0..g.kh {
                let off_y = g.tap_offset_y(ki);
                let (oy0, oy1) = tap_range(off_y, g.stride, g.h, g.ho);
                for kj in 0..g.kw {
                    let off_x = g.tap_offset_x(kj);
                    let (ox0, ox1) = tap_range(off_x, g.stride, g.w, g.wo);
                    if ox1 <= ox0 {
                        continue;
                    }
                    let widx = (c * g.kh + ki) * g.kw + kj;
                    let wv = w[widx];
                    let row_start = |oy: usize| {
                        let iy = ((oy * g.stride) as isize + off_y) as usize;
                        base_in + iy * g.w + ((ox0 * g.stride) as isize + off_x) as usize
                    };
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let d = &dy[base_out + oy * g.wo + ox0..base_out + oy * g.wo + ox1];
                            let xs = &x[row_start(oy)..];
                            if g.stride == 1 {
                                for (dv, xv) in d.iter().zip(&xs[..d.len()]) {
                                    acc += dv * xv;
                                }
                            } else {
                                for (dv, xv) in d.iter().zip(xs.iter().step_by(g.stride)) {
                                    acc += dv * xv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        for oy in oy0..oy1 {
                            let d = &dy[base_out + oy * g.wo + ox0..base_out + oy * g.wo + ox1];
                            scatter_taps(d, wv, g.stride, &mut dx[row_start(oy)..]);
                        }
                    }
                }
            }
        }
    }
}

/// Plain (tape-free) convolution.
pub fn conv2d_tensor(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let g = Geometry::new(
        input.shape(),
        weight.shape(),
        stride,
        dilation,
        padding,
        groups,
    )?;
    if let Some(b) = bias {
        if b.shape().numel() != g.cout {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias has {} values for {} out channels",
                    b.shape().numel(),
                    g.cout
                ),
            ));
        }
    }
    let out = forward(input.data(), weight.data(), bias.map(Tensor::data), &g);
    Tensor::from_vec(g.output_shape(), out)
}

struct Conv2dOp {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: Geometry,
}

impl Backward for Conv2dOp {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.input, self.weight];
        v.extend(self.bias);
        v
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geom;
        let x = ctx.value(self.input);
        let w = ctx.value(self.weight);
        let dy = grad.data();
        let p_out = g.plane_out();
        let want_dx = ctx.needs_grad(self.input);
        let want_dw = ctx.needs_grad(self.weight);
        let mut dx = want_dx.then(|| vec![0.0; x.shape().numel()]);
        let mut dw = want_dw.then(|| vec![0.0; w.shape().numel()]);

        if g.is_depthwise() {
            depthwise_backward(
                x.data(),
                w.data(),
                dy,
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
            );
        } else if g.is_pointwise() {
            for n in 0..g.n {
                let dy_n = &dy[n * g.cout * p_out..];
                if let Some(dw) = dw.as_deref_mut() {
                    gemm(
                        g.cout,
                        p_out,
                        g.cin,
                        dy_n,
                        p_out,
                        1,
                        &x.data()[n * g.cin * p_out..],
                        1,
                        p_out,
                        1.0,
                        dw,
                        g.cin,
                        1,
                    );
                }
                if let Some(dx) = dx.as_deref_mut() {
                    gemm(
                        g.cin,
                        g.cout,
                        p_out,
                        w.data(),
                        1,
                        g.cin,
                        dy_n,
                        p_out,
                        1,
                        0.0,
                        &mut dx[n * g.cin * p_out..],
                        p_out,
                        1,
                    );
                }
            }
        } else {
            let r = g.cin_g() * g.kh * g.kw;
            let q = g.n * p_out;
            with_col(r * q, |col| {
                for group in 0..g.groups {
                    let w_g = &w.data()[group * g.cout_g() * r..];
                    if let Some(dw) = dw.as_deref_mut() {
                        im2col(x.data(), g, group, col);
                        for n in 0..g.n {
                            gemm(
                                g.cout_g(),
                                p_out,
                                r,
                                &dy[(n * g.cout + group * g.cout_g()) * p_out..],
                                p_out,
                                1,
                                &col[n * p_out..],
                                1,
                                q,
                                1.0,
                                &mut dw[group * g.cout_g() * r..],
                                r,
                                1,
                            );
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        for n in 0..g.n {
                            gemm(
                                r,
                                g.cout_g(),
                                p_out,
                                w_g,
                                1,
                                r,
                                &dy[(n * g.cout + group * g.cout_g()) * p_out..],
                                p_out,
                                1,
                                0.0,
                                &mut col[n * p_out..],
                                q,
                                1,
                            );
                        }
                        col2im(col, g, group, dx);
                    }
                }
            });
        }

        let db = self.bias.filter(|b| ctx.needs_grad(*b)).map(|_| {
            let mut db = vec![0.0; g.cout];
            for n in 0..g.n {
                for (o, acc) in db.iter_mut().enumerate() {
                    let base = (n * g.cout + o) * p_out;
                    *acc += dy[base..base + p_out].iter().sum::<f64>();
                }
            }
            Tensor::from_vec(Shape::new(1, g.cout, 1, 1), db)
        });

        let mut out = vec![
            dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
            dw.map(|d| Tensor::from_vec(w.shape(), d)).transpose()?,
        ];
        if self.bias.is_some() {
            out.push(db.transpose()?);
        }
        Ok(out)
    }
}

impl Tape {
    pub fn conv2d(&mut self, x: Var, params: &ConvParams) -> Result<Var> {
        let w = self.param(&params.weight);
        let b = params.bias.as_ref().map(|b| self.param(b));
        self.conv2d_with(
            x,
            w,
            b,
            params.stride,
            params.dilation,
            params.padding,
            params.groups,
        )
    }

    /// Convolution with weight (and bias) already on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_with(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = Geometry::new(
            self.shape(x),
            self.shape(weight),
            stride,
            dilation,
            padding,
            groups,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != Shape::new(1, geom.cout, 1, 1) {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "bias shape {} for {} out channels",
                        self.shape(b),
                        geom.cout
                    ),
                ));
            }
        }
        let out = forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(geom.output_shape(), out)?;
        Ok(self.push(
            value,
            Box::new(Conv2dOp {
                input: x,
                weight,
                bias,
                geom,
            }),
        ))
    }

    /// Depthwise convolution followed by a 1×1 pointwise convolution.
    pub fn depthwise_separable(
        &mut self,
        x: Var,
        depthwise: &ConvParams,
        pointwise: &ConvParams,
    ) -> Result<Var> {
        let channels = self.shape(x).c();
        if depthwise.groups != channels || depthwise.out_channels() != channels {
            return Err(Error::shape(
                "depthwise_separable",
                format!(
                    "depthwise groups {} / out channels {} must equal input channels {channels}",
                    depthwise.groups,
                    depthwise.out_channels()
                ),
            ));
        }
        if pointwise.kernel() != (1, 1) {
            return Err(Error::shape(
                "depthwise_separable",
                format!("pointwise kernel is {:?}, expected 1×1", pointwise.kernel()),
            ));
        }
        let mid = self.conv2d(x, depthwise)?;
        self.conv2d(mid, pointwise)
    }
}
