//! Forward and backward kernels on raw NCHW buffers. The graph layer owns
//! bookkeeping; everything here is shape arithmetic and loops.

use crate::error::{Error, Result};

use super::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn stride(mut self, sy: usize, sx: usize) -> Self {
        self.stride = (sy, sx);
        self
    }

    pub fn padding(mut self, py: usize, px: usize) -> Self {
        self.padding = (py, px);
        self
    }

    pub fn dilation(mut self, dy: usize, dx: usize) -> Self {
        self.dilation = (dy, dx);
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// "Same" padding for an odd kernel at this dilation.
    pub fn same(kh: usize, kw: usize) -> Self {
        ConvSpec::default().padding(kh / 2, kw / 2)
    }
}

fn out_dim(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output shape of a convolution, validating every precondition.
pub fn conv2d_shape(input: Shape, weight: Shape, spec: &ConvSpec) -> Result<Shape> {
    let g = spec.groups;
    if g == 0 || input.c % g != 0 || weight.n % g != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "channels (in {}, out {}) not divisible by groups {}",
                input.c, weight.n, g
            ),
        ));
    }
    if weight.c != input.c / g {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: Shape::new(weight.n, input.c / g, weight.h, weight.w),
            found: weight,
        });
    }
    if spec.dilation.0 == 0 || spec.dilation.1 == 0 || weight.h == 0 || weight.w == 0 {
        return Err(Error::invalid("conv2d", "zero kernel or dilation"));
    }
    let ho = out_dim(input.h, weight.h, spec.stride.0, spec.padding.0, spec.dilation.0);
    let wo = out_dim(input.w, weight.w, spec.stride.1, spec.padding.1, spec.dilation.1);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(Shape::new(input.n, weight.n, ho, wo)),
        _ => Err(Error::invalid(
            "conv2d",
            format!("kernel {weight} does not fit input {input} under {spec:?}"),
        )),
    }
}

struct ConvDims {
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(input: Shape, weight: Shape, out: Shape, groups: usize) -> Self {
        ConvDims {
            cin_g: input.c / groups,
            cout_g: weight.n / groups,
            kh: weight.h,
            kw: weight.w,
            h: input.h,
            w: input.w,
            ho: out.h,
            wo: out.w,
        }
    }

    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn pointwise(spec: &ConvSpec, d: &ConvDims) -> bool {
    d.kh == 1
        && d.kw == 1
        && spec.stride == (1, 1)
        && spec.padding == (0, 0)
        && spec.groups == 1
}

fn depthwise(d: &ConvDims) -> bool {
    d.cin_g == 1 && d.cout_g == 1
}

/// `x` holds `cin_g` planes of `h×w`; `cols` becomes (cin_g·kh·kw) × (ho·wo).
fn im2col<T: Real>(x: &[T], spec: &ConvSpec, d: &ConvDims, cols: &mut [T]) {
    let p = d.p();
    let (sy, sx) = spec.stride;
    let (py, px) = spec.padding;
    let (dy, dx) = spec.dilation;
    for ci in 0..d.cin_g {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * sy + ky * dy) as isize - py as isize;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sx + kx * dx) as isize - px as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], spec: &ConvSpec, d: &ConvDims, dx_planes: &mut [T]) {
    let p = d.p();
    let (sy, sx) = spec.stride;
    let (py, px) = spec.padding;
    let (dy, dxl) = spec.dilation;
    for ci in 0..d.cin_g {
        let plane = &mut dx_planes[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * sy + ky * dy) as isize - py as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let line = &src[oy * d.wo..(oy + 1) * d.wo];
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * sx + kx * dxl) as isize - px as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], spec: &ConvSpec, d: &ConvDims, out: &mut [T]) {
    let (sy, sx) = spec.stride;
    let (py, px) = spec.padding;
    let (dy, dx) = spec.dilation;
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let mut acc = T::zero();
            for ky in 0..d.kh {
                let iy = (oy * sy + ky * dy) as isize - py as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * sx + kx * dx) as isize - px as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    acc += w[ky * d.kw + kx] * x[iy as usize * d.w + ix as usize];
                }
            }
            out[oy * d.wo + ox] = acc;
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    spec: &ConvSpec,
    d: &ConvDims,
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (sy, sx) = spec.stride;
    let (py, px) = spec.padding;
    let (dy, dx) = spec.dilation;
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let g = gy[oy * d.wo + ox];
            if g == T::zero() {
                continue;
            }
            for ky in 0..d.kh {
                let iy = (oy * sy + ky * dy) as isize - py as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * sx + kx * dx) as isize - px as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let xi = iy as usize * d.w + ix as usize;
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[xi] += g * w[ky * d.kw + kx];
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[ky * d.kw + kx] += g * x[xi];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = conv2d_shape(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        let expected = Shape::new(1, weight.shape().n, 1, 1);
        if b.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                expected,
                found: b.shape(),
            });
        }
    }
    let s = x.shape();
    let d = ConvDims::new(s, weight.shape(), out_shape, spec.groups);
    let mut out = Tensor::zeros(out_shape);
    let (k, p) = (d.k(), d.p());
    let in_plane = s.h * s.w;
    let mut cols = if pointwise(spec, &d) || depthwise(&d) {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    {
        let xd = x.data();
        let wd = weight.data();
        let od = out.data_mut();
        for n in 0..s.n {
            for g in 0..spec.groups {
                let xg = &xd[(n * s.c + g * d.cin_g) * in_plane..][..d.cin_g * in_plane];
                let wg = &wd[g * d.cout_g * k..(g + 1) * d.cout_g * k];
                let og = &mut od[(n * out_shape.c + g * d.cout_g) * p..][..d.cout_g * p];
                if depthwise(&d) {
                    depthwise_forward(xg, wg, spec, &d, og);
                } else if pointwise(spec, &d) {
                    T::gemm(d.cout_g, k, p, wg, false, xg, false, og, false);
                } else {
                    im2col(xg, spec, &d, &mut cols);
                    T::gemm(d.cout_g, k, p, wg, false, &cols, false, og, false);
                }
            }
            if let Some(b) = bias {
                for (c, bv) in b.data().iter().enumerate() {
                    let plane = &mut od[(n * out_shape.c + c) * p..][..p];
                    plane.iter_mut().for_each(|v| *v += *bv);
                }
            }
        }
    }
    Ok(out)
}

/// Accumulates gradients of a convolution into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    out_shape: Shape,
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let s = x.shape();
    let d = ConvDims::new(s, weight.shape(), out_shape, spec.groups);
    let (k, p) = (d.k(), d.p());
    let in_plane = s.h * s.w;
    let xd = x.data();
    let wd = weight.data();
    let direct = pointwise(spec, &d) || depthwise(&d);
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); k * p] };
    let mut gcols = if direct || gx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..s.n {
        for g in 0..spec.groups {
            let x_off = (n * s.c + g * d.cin_g) * in_plane;
            let xg = &xd[x_off..x_off + d.cin_g * in_plane];
            let wg = &wd[g * d.cout_g * k..(g + 1) * d.cout_g * k];
            let gyg = &gy[(n * out_shape.c + g * d.cout_g) * p..][..d.cout_g * p];
            if depthwise(&d) {
                depthwise_backward(
                    xg,
                    wg,
                    spec,
                    &d,
                    gyg,
                    gx.as_deref_mut()
                        .map(|b| &mut b[x_off..x_off + d.cin_g * in_plane]),
                    gw.as_deref_mut().map(|b| &mut b[g * k..(g + 1) * k]),
                );
                continue;
            }
            if !pointwise(spec, &d) {
                im2col(xg, spec, &d, &mut cols);
            }
            let colsg: &[T] = if pointwise(spec, &d) { xg } else { &cols };
            if let Some(gw) = gw.as_deref_mut() {
                let gwg = &mut gw[g * d.cout_g * k..(g + 1) * d.cout_g * k];
                T::gemm(d.cout_g, p, k, gyg, false, colsg, true, gwg, true);
            }
            if let Some(gx) = gx.as_deref_mut() {
                let gxg = &mut gx[x_off..x_off + d.cin_g * in_plane];
                if pointwise(spec, &d) {
                    T::gemm(k, d.cout_g, p, wg, true, gyg, false, gxg, true);
                } else {
                    T::gemm(k, d.cout_g, p, wg, true, gyg, false, &mut gcols, false);
                    col2im(&gcols, spec, &d, gxg);
                }
            }
        }
    }
    if let Some(gb) = gb {
        for n in 0..s.n {
            for (c, b) in gb.iter_mut().enumerate() {
                let plane = &gy[(n * out_shape.c + c) * p..][..p];
                *b += plane.iter().copied().sum::<T>();
            }
        }
    }
}

/// One axis of a bilinear resize: source indices and the weight of the upper one.
#[derive(Clone, Debug)]
pub struct ResizeAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl ResizeAxis {
    pub fn new(input: usize, output: usize, align_corners: bool) -> Self {
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = if align_corners {
                if output > 1 {
                    o as f64 * (input - 1) as f64 / (output - 1) as f64
                } else {
                    0.0
                }
            } else {
                ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0)
            };
            let l = (src.floor() as usize).min(input - 1);
            let h = (l + 1).min(input - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { src - l as f64 });
        }
        ResizeAxis { lo, hi, frac }
    }
}

pub fn resize_forward<T: Real>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "bilinear_resize",
            format!("target size {out_h}x{out_w} must be positive"),
        ));
    }
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::invalid("bilinear_resize", "empty input"));
    }
    let ry = ResizeAxis::new(s.h, out_h, align_corners);
    let rx = ResizeAxis::new(s.w, out_w, align_corners);
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(out_shape);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..s.n * s.c {
        let src = &xd[nc * s.h * s.w..(nc + 1) * s.h * s.w];
        let dst = &mut od[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1) = (ry.lo[oy], ry.hi[oy]);
            let wy = T::of(ry.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1) = (rx.lo[ox], rx.hi[ox]);
                let wx = T::of(rx.frac[ox]);
                let top = src[y0 * s.w + x0] * (T::one() - wx) + src[y0 * s.w + x1] * wx;
                let bot = src[y1 * s.w + x0] * (T::one() - wx) + src[y1 * s.w + x1] * wx;
                dst[oy * out_w + ox] = top * (T::one() - wy) + bot * wy;
            }
        }
    }
    Ok(out)
}

pub fn resize_backward<T: Real>(in_shape: Shape, out_shape: Shape, align_corners: bool, gy: &[T], gx: &mut [T]) {
    let s = in_shape;
    let (out_h, out_w) = (out_shape.h, out_shape.w);
    let ry = ResizeAxis::new(s.h, out_h, align_corners);
    let rx = ResizeAxis::new(s.w, out_w, align_corners);
    for nc in 0..s.n * s.c {
        let g = &gy[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        let dst = &mut gx[nc * s.h * s.w..(nc + 1) * s.h * s.w];
        for oy in 0..out_h {
            let (y0, y1) = (ry.lo[oy], ry.hi[oy]);
            let wy = T::of(ry.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1) = (rx.lo[ox], rx.hi[ox]);
                let wx = T::of(rx.frac[ox]);
                let v = g[oy * out_w + ox];
                let top = v * (T::one() - wy);
                let bot = v * wy;
                dst[y0 * s.w + x0] += top * (T::one() - wx);
                dst[y0 * s.w + x1] += top * wx;
                dst[y1 * s.w + x0] += bot * (T::one() - wx);
                dst[y1 * s.w + x1] += bot * wx;
            }
        }
    }
}

/// Numerically stable channel softmax, one pixel at a time.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    let xd = x.data();
    let od = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(xd[base + c * p + i]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (xd[base + c * p + i] - m).exp();
                od[base + c * p + i] = e;
                z += e;
            }
            for c in 0..s.c {
                od[base + c * p + i] = od[base + c * p + i] / z;
            }
        }
    }
    out
}

/// Bilinear sample of one plane at continuous lattice coordinates.
#[inline]
pub fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> [(usize, f64); 4] {
    let x0 = (x.floor().max(0.0) as usize).min(w - 1);
    let y0 = (y.floor().max(0.0) as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = if x1 == x0 { 0.0 } else { (x - x0 as f64).clamp(0.0, 1.0) };
    let fy = if y1 == y0 { 0.0 } else { (y - y0 as f64).clamp(0.0, 1.0) };
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}
