//! Forward and backward kernels.
//!
//! Every kernel is a pure function of its inputs. Convolution is
//! cross-correlation (no kernel flip), computed per batch item as an
//! im2col product so that the result for one image never depends on the
//! rest of the batch.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Spatial padding rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `dilation * (k - 1) / 2` on each side; preserves size at stride 1 for odd `k`.
    Same,
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_c: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square, stride-1, "same"-padded convolution with bias.
    pub fn same(in_c: usize, out_c: usize, k: usize, dilation: usize) -> Self {
        ConvSpec {
            out_c,
            in_c,
            kh: k,
            kw: k,
            stride: 1,
            dilation,
            padding: Padding::Same,
            has_bias: true,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_c, self.in_c, self.kh, self.kw)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(self.out_c, 1, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_c } else { 0 }
    }

    fn pads(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => (
                self.dilation * (self.kh - 1) / 2,
                self.dilation * (self.kw - 1) / 2,
            ),
            Padding::Explicit(p) => (p, p),
        }
    }

    /// Output `(h, w)` for an input of the given size.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.pads();
        let eff_h = self.dilation * (self.kh - 1) + 1;
        let eff_w = self.dilation * (self.kw - 1) + 1;
        if h + 2 * ph < eff_h || w + 2 * pw < eff_w {
            return Err(Error::Shape(format!(
                "input {h}x{w} is smaller than the dilated kernel extent {eff_h}x{eff_w}"
            )));
        }
        Ok((
            (h + 2 * ph - eff_h) / self.stride + 1,
            (w + 2 * pw - eff_w) / self.stride + 1,
        ))
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::Invalid(format!(
                "stride, dilation and kernel size must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

struct ConvGeom {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        spec.kh == 1 && spec.kw == 1 && spec.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<ConvGeom> {
    spec.validate()?;
    let s = input.shape();
    if s.c != spec.in_c {
        return Err(Error::Shape(format!(
            "conv2d input channels: got {}, kernel expects in_c = {}",
            s.c, spec.in_c
        )));
    }
    let ws = weights.shape();
    let expect = spec.weight_shape();
    if ws != expect {
        let dim = ["out_c", "in_c", "kh", "kw"]
            .iter()
            .zip(ws.dims().iter().zip(expect.dims()))
            .find(|(_, (a, b))| *a != b)
            .map(|(name, _)| *name)
            .unwrap_or("?");
        return Err(Error::Shape(format!(
            "conv2d weight {dim}: weight shape {ws} does not match spec {expect}"
        )));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.numel() != spec.out_c => {
            return Err(Error::Shape(format!(
                "conv2d bias out_c: bias has {} elements, spec has out_c = {}",
                b.numel(),
                spec.out_c
            )))
        }
        (None, true) => return Err(Error::Shape("conv2d bias: spec requires a bias".into())),
        (Some(_), false) => return Err(Error::Shape("conv2d bias: spec declares no bias".into())),
        _ => {}
    }
    let (out_h, out_w) = spec.output_hw(s.h, s.w)?;
    let (ph, pw) = spec.pads();
    Ok(ConvGeom {
        in_h: s.h,
        in_w: s.w,
        out_h,
        out_w,
        ph,
        pw,
    })
}

/// Lower one `(c, h, w)` image into a `(c*kh*kw, out_h*out_w)` column matrix.
fn im2col<T: Scalar>(img: &[T], spec: &ConvSpec, g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.out_h * g.out_w;
    let plane = g.in_h * g.in_w;
    for ci in 0..spec.in_c {
        let src = &img[ci * plane..(ci + 1) * plane];
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let row = (ci * spec.kh + ki) * spec.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let dy = (ki * spec.dilation) as isize - g.ph as isize;
                let dx = (kj * spec.dilation) as isize - g.pw as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * spec.stride) as isize + dy;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride) as isize + dx;
                        *o = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
fn col2im<T: Scalar>(cols: &[T], spec: &ConvSpec, g: &ConvGeom, img: &mut [T]) {
    let ohw = g.out_h * g.out_w;
    let plane = g.in_h * g.in_w;
    for ci in 0..spec.in_c {
        let dst = &mut img[ci * plane..(ci + 1) * plane];
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let row = (ci * spec.kh + ki) * spec.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let dy = (ki * spec.dilation) as isize - g.ph as isize;
                let dx = (kj * spec.dilation) as isize - g.pw as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * spec.stride) as isize + dy;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * spec.stride) as isize + dx;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, spec, weights, bias)?;
    let n = input.shape().n;
    let k = spec.in_c * spec.kh * spec.kw;
    let ohw = g.out_h * g.out_w;
    let mut out = Tensor::zeros(Shape::new(n, spec.out_c, g.out_h, g.out_w));
    let in_len = spec.in_c * g.in_h * g.in_w;
    let out_len = spec.out_c * ohw;
    let pointwise = g.is_pointwise(spec);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * ohw]
    };
    for b in 0..n {
        let img = &input.data()[b * in_len..(b + 1) * in_len];
        let col_ref: &[T] = if pointwise {
            img
        } else {
            im2col(img, spec, &g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        T::gemm(
            spec.out_c,
            k,
            ohw,
            T::one(),
            weights.data(),
            k as isize,
            1,
            col_ref,
            ohw as isize,
            1,
            T::zero(),
            dst,
            ohw as isize,
            1,
        );
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[oc * ohw..(oc + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, spec, weights, bias)?;
    let n = input.shape().n;
    let k = spec.in_c * spec.kh * spec.kw;
    let ohw = g.out_h * g.out_w;
    let expect = Shape::new(n, spec.out_c, g.out_h, g.out_w);
    if grad_out.shape() != expect {
        return Err(Error::Shape(format!(
            "conv2d backward: upstream gradient {} != output {expect}",
            grad_out.shape()
        )));
    }
    let in_len = spec.in_c * g.in_h * g.in_w;
    let out_len = spec.out_c * ohw;
    let pointwise = g.is_pointwise(spec);

    let mut d_in = Tensor::zeros(input.shape());
    let mut d_w = Tensor::zeros(weights.shape());
    let mut d_b = bias.map(|b| Tensor::zeros(b.shape()));
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * ohw }];
    let mut dcols = vec![T::zero(); k * ohw];

    for b in 0..n {
        let img = &input.data()[b * in_len..(b + 1) * in_len];
        let gout = &grad_out.data()[b * out_len..(b + 1) * out_len];
        let col_ref: &[T] = if pointwise {
            img
        } else {
            im2col(img, spec, &g, &mut cols);
            &cols
        };
        // dW += gout · colsᵀ
        T::gemm(
            spec.out_c,
            ohw,
            k,
            T::one(),
            gout,
            ohw as isize,
            1,
            col_ref,
            1,
            ohw as isize,
            T::one(),
            d_w.data_mut(),
            k as isize,
            1,
        );
        // dcols = Wᵀ · gout
        T::gemm(
            k,
            spec.out_c,
            ohw,
            T::one(),
            weights.data(),
            1,
            k as isize,
            gout,
            ohw as isize,
            1,
            T::zero(),
            &mut dcols,
            ohw as isize,
            1,
        );
        let dst = &mut d_in.data_mut()[b * in_len..(b + 1) * in_len];
        if pointwise {
            for (d, &s) in dst.iter_mut().zip(&dcols) {
                *d += s;
            }
        } else {
            col2im(&dcols, spec, &g, dst);
        }
        if let Some(db) = d_b.as_mut() {
            for oc in 0..spec.out_c {
                let s: T = gout[oc * ohw..(oc + 1) * ohw].iter().copied().sum();
                db.data_mut()[oc] += s;
            }
        }
    }
    Ok(ConvGrads {
        input: d_in,
        weights: d_w,
        bias: d_b,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu; the derivative at exactly zero is taken as zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Overflow-free logistic function.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

fn pool_out(len: usize, window: usize, stride: usize, pad: usize) -> Result<usize> {
    if len + 2 * pad < window {
        return Err(Error::Shape(format!(
            "pooling window {window} exceeds padded extent {}",
            len + 2 * pad
        )));
    }
    Ok((len + 2 * pad - window) / stride + 1)
}

fn avg_pool_pad(window: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => (window - 1) / 2,
        Padding::Explicit(p) => p,
    }
}

/// Mean pooling. Border windows divide by the full window area: padded
/// cells count as zeros.
pub fn avg_pool<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    if window == 0 || stride == 0 {
        return Err(Error::Invalid(
            "avg_pool window and stride must be ≥ 1".into(),
        ));
    }
    let s = x.shape();
    let pad = avg_pool_pad(window, padding);
    let oh = pool_out(s.h, window, stride, pad)?;
    let ow = pool_out(s.w, window, stride, pad)?;
    let area = T::lit((window * window) as f64);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..oh {
                let y0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let x0 = (ox * stride) as isize - pad as isize;
                    let mut acc = T::zero();
                    for iy in y0.max(0)..(y0 + window as isize).min(s.h as isize) {
                        let row = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                        for ix in x0.max(0)..(x0 + window as isize).min(s.w as isize) {
                            acc += row[ix as usize];
                        }
                    }
                    dst[oy * ow + ox] = acc / area;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Scalar>(
    input_shape: Shape,
    window: usize,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let s = input_shape;
    let pad = avg_pool_pad(window, padding);
    let go = grad_out.shape();
    let area = T::lit((window * window) as f64);
    let mut d_in = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = d_in.plane_mut(n, c);
            for oy in 0..go.h {
                let y0 = (oy * stride) as isize - pad as isize;
                for ox in 0..go.w {
                    let x0 = (ox * stride) as isize - pad as isize;
                    let share = g[oy * go.w + ox] / area;
                    for iy in y0.max(0)..(y0 + window as isize).min(s.h as isize) {
                        for ix in x0.max(0)..(x0 + window as isize).min(s.w as isize) {
                            dst[iy as usize * s.w + ix as usize] += share;
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output element, the flat input index
/// of the selected maximum (first maximum in row-major window order).
pub fn max_pool_2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::Shape(format!(
            "max_pool_2x2 needs height and width ≥ 2, got {}x{}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut argmax = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let base = x.index(n, c, 0, 0);
            let src = x.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * s.w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    argmax.push(base + best);
                }
            }
        }
    }
    for (o, &i) in out.data_mut().iter_mut().zip(&argmax) {
        *o = x.data()[i];
    }
    Ok((out, argmax))
}

pub fn max_pool_2x2_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut d_in = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d_in.data_mut()[i] += g;
    }
    d_in
}

/// Per-axis interpolation table: `(i0, i1, frac)` for each output index.
fn half_pixel_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`),
/// source coordinates clamped at the border.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::Invalid(format!(
            "bilinear_resize: {}x{} -> {out_h}x{out_w} has an empty side",
            s.h, s.w
        )));
    }
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let ty = half_pixel_table(s.h, out_h);
    let tx = half_pixel_table(s.w, out_w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let a = src[y0 * s.w + x0];
                    let b = src[y0 * s.w + x1];
                    let c_ = src[y1 * s.w + x0];
                    let d = src[y1 * s.w + x1];
                    // lerp form keeps constant inputs exact
                    let top = a + fx * (b - a);
                    let bottom = c_ + fx * (d - c_);
                    dst[oy * out_w + ox] = top + fy * (bottom - top);
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let go = grad_out.shape();
    if (go.h, go.w) == (s.h, s.w) {
        return grad_out.clone();
    }
    let ty = half_pixel_table(s.h, go.h);
    let tx = half_pixel_table(s.w, go.w);
    let mut d_in = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = d_in.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let v = g[oy * go.w + ox];
                    let one = T::one();
                    dst[y0 * s.w + x0] += v * (one - fx) * (one - fy);
                    dst[y0 * s.w + x1] += v * fx * (one - fy);
                    dst[y1 * s.w + x0] += v * (one - fx) * fy;
                    dst[y1 * s.w + x1] += v * fx * fy;
                }
            }
        }
    }
    d_in
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Invalid("concat_channels of an empty list".into()))?
        .shape();
    for (i, x) in xs.iter().enumerate() {
        let s = x.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::Shape(format!(
                "concat_channels input {i}: shape {s} disagrees with {first} outside the channel axis"
            )));
        }
    }
    let total_c: usize = xs.iter().map(|x| x.shape().c).sum();
    let mut out = Tensor::zeros(Shape::new(first.n, total_c, first.h, first.w));
    for n in 0..first.n {
        let mut c0 = 0;
        for x in xs {
            for c in 0..x.shape().c {
                out.plane_mut(n, c0 + c).copy_from_slice(x.plane(n, c));
            }
            c0 += x.shape().c;
        }
    }
    Ok(out)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn concat_channels_backward<T: Scalar>(
    shapes: &[Shape],
    grad_out: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let mut c0 = 0;
    shapes
        .iter()
        .map(|&s| {
            let mut g = Tensor::zeros(s);
            for n in 0..s.n {
                for c in 0..s.c {
                    g.plane_mut(n, c).copy_from_slice(grad_out.plane(n, c0 + c));
                }
            }
            c0 += s.c;
            g
        })
        .collect()
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: operand shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, h, w), v.to_vec()).unwrap()
    }

    /// Direct nested-loop evaluation of a cross-correlation.
    fn conv_oracle(
        x: &Tensor<f64>,
        spec: &ConvSpec,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
    ) -> Tensor<f64> {
        let s = x.shape();
        let (ph, pw) = spec.pads();
        let (oh, ow) = spec.output_hw(s.h, s.w).unwrap();
        let mut out = Tensor::zeros(Shape::new(s.n, spec.out_c, oh, ow));
        for n in 0..s.n {
            for o in 0..spec.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for i in 0..spec.in_c {
                            for ky in 0..spec.kh {
                                for kx in 0..spec.kw {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                        - ph as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                        - pw as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < s.h
                                        && (ix as usize) < s.w
                                    {
                                        acc += x.at(n, i, iy as usize, ix as usize)
                                            * w.at(o, i, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(n, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_box_sum() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let mut spec = ConvSpec::same(1, 1, 3, 1);
        spec.has_bias = false;
        let y = conv2d(&x, &spec, &w, None).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, r, c), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(Shape::new(2, 1, 5, 6), 1.0, &mut rng);
        let mut w = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        for d in [1, 2, 3] {
            let mut spec = ConvSpec::same(1, 1, 3, d);
            spec.has_bias = false;
            assert_eq!(conv2d(&x, &spec, &w, None).unwrap(), x);
        }
    }

    #[test]
    fn conv_dilated_ramp_matches_loop_oracle() {
        let x = t(7, 7, &(0..49).map(|v| v as f64).collect::<Vec<_>>());
        let w = t(3, 3, &[1.0, -2.0, 0.5, 3.0, 1.0, -1.0, 0.25, 2.0, -0.5]);
        let spec = ConvSpec {
            has_bias: false,
            ..ConvSpec::same(1, 1, 3, 2)
        };
        let y = conv2d(&x, &spec, &w, None).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 7, 7));
        assert_eq!(y, conv_oracle(&x, &spec, &w, None));
    }

    #[test]
    fn conv_general_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (spec, h, w) in [
            (ConvSpec::same(3, 4, 3, 1), 6, 5),
            (ConvSpec::same(2, 3, 3, 5), 9, 8),
            (ConvSpec::same(4, 2, 1, 1), 5, 5),
            (
                ConvSpec {
                    stride: 2,
                    padding: Padding::Explicit(1),
                    ..ConvSpec::same(2, 2, 3, 1)
                },
                7,
                6,
            ),
        ] {
            let x = Tensor::<f64>::randn(Shape::new(2, spec.in_c, h, w), 1.0, &mut rng);
            let k = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
            let b = Tensor::<f64>::randn(spec.bias_shape(), 1.0, &mut rng);
            let y = conv2d(&x, &spec, &k, Some(&b)).unwrap();
            let o = conv_oracle(&x, &spec, &k, Some(&b));
            assert!(y.max_abs_diff(&o).unwrap() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn conv_same_padding_preserves_size_for_any_dilation() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 13, 11));
        for d in 1..=11 {
            let spec = ConvSpec::same(2, 3, 3, d);
            let w = Tensor::zeros(spec.weight_shape());
            let b = Tensor::zeros(spec.bias_shape());
            let y = conv2d(&x, &spec, &w, Some(&b)).unwrap();
            assert_eq!((y.shape().h, y.shape().w), (13, 11));
        }
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let spec = ConvSpec::same(3, 4, 3, 1);
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(spec.weight_shape());
        let b = Tensor::zeros(spec.bias_shape());
        let err = conv2d(&x, &spec, &w, Some(&b)).unwrap_err().to_string();
        assert!(err.contains("in_c"), "{err}");

        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let bad_w = Tensor::zeros(Shape::new(4, 3, 5, 3));
        let err = conv2d(&x, &spec, &bad_w, Some(&b)).unwrap_err().to_string();
        assert!(err.contains("kh"), "{err}");
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let x = t(1, 3, &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::<f64>::full(Shape::new(1, 2, 2, 2), -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));

        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!((sigmoid_scalar(50.0f64) - 1.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-50.0f64).abs() < 1e-15);
        assert!(sigmoid_scalar(-1000.0f64).is_finite());
        assert!(sigmoid_scalar(1000.0f32).is_finite());
        // 1 / (1 + e^-2)
        assert!((sigmoid_scalar(2.0f64) - 0.880_797_077_977_882_3).abs() < 1e-15);
    }

    #[test]
    fn avg_pool_cases() {
        let c = Tensor::<f64>::full(Shape::new(1, 1, 9, 9), 0.7);
        let y = avg_pool(&c, 5, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), c.shape());
        for r in 2..7 {
            for q in 2..7 {
                assert!((y.at(0, 0, r, q) - 0.7).abs() < 1e-15);
            }
        }
        // border windows count padding
        assert!((y.at(0, 0, 0, 0) - 0.7 * 9.0 / 25.0).abs() < 1e-15);

        let x = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = avg_pool(&x, 2, 2, Padding::Explicit(0)).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn avg_pool_ramp_matches_loop_oracle() {
        let x = t(5, 5, &(0..25).map(|v| v as f64).collect::<Vec<_>>());
        let y = avg_pool(&x, 5, 1, Padding::Same).unwrap();
        for r in 0..5i32 {
            for c in 0..5i32 {
                let mut acc = 0.0;
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        let (yy, xx) = (r + dy, c + dx);
                        if (0..5).contains(&yy) && (0..5).contains(&xx) {
                            acc += (yy * 5 + xx) as f64;
                        }
                    }
                }
                assert!((y.at(0, 0, r as usize, c as usize) - acc / 25.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_cases() {
        let (y, _) = max_pool_2x2(&t(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let (y, _) = max_pool_2x2(&Tensor::<f64>::full(Shape::new(1, 2, 6, 7), 3.0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 3, 3));
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert!(max_pool_2x2(&t(1, 4, &[0.0; 4])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(Shape::new(1, 1, 6, 6), 1.0, &mut rng);
        let (y, _) = max_pool_2x2(&x).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.at(0, 0, 2 * r + dy, 2 * c + dx));
                    }
                }
                assert_eq!(y.at(0, 0, r, c), m);
            }
        }
    }

    #[test]
    fn bilinear_cases() {
        let c = Tensor::<f32>::full(Shape::new(1, 2, 5, 7), 0.3);
        let up = bilinear_resize(&c, 13, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
        assert_eq!(bilinear_resize(&up, 5, 7).unwrap(), c);

        let x = t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(bilinear_resize(&x, 2, 3).unwrap(), x);

        // [[0,1],[0,1]] -> 4x4 with half-pixel centres:
        // column sources -0.25(clamped 0), 0.25, 0.75, 1.25(clamped 1)
        let y = bilinear_resize(&t(2, 2, &[0.0, 1.0, 0.0, 1.0]), 4, 4).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = (0..4).map(|c| y.at(0, 0, r, c)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn concat_and_add() {
        let a = Tensor::<f32>::full(Shape::new(1, 1, 4, 4), 1.0);
        let b = Tensor::<f32>::full(Shape::new(1, 1, 4, 4), 2.0);
        let c = Tensor::<f32>::full(Shape::new(1, 1, 4, 4), 3.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 4, 4));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let y3 = concat_channels(&[&a, &b, &c]).unwrap();
        assert_eq!(y3.channel(0), a);
        assert_eq!(y3.channel(1), b);
        assert_eq!(y3.channel(2), c);
        let bad = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 5));
        assert!(concat_channels(&[&a, &bad]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Tensor::<f32>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
        let q = Tensor::<f32>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
        assert_eq!(add(&p, &Tensor::zeros(p.shape())).unwrap(), p);
        assert!(add(&p, &p.map(|v| -v))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let s = add(&p, &q).unwrap();
        for i in 0..p.numel() {
            assert_eq!(s.data()[i], p.data()[i] + q.data()[i]);
        }
        assert!(add(&p, &a).is_err());
    }
}
