//! Edge probability maps: single-scale, multiscale-averaged and thinned.

use crate::error::{Error, Result};
use crate::kernels::{self, sigmoid_scalar};
use crate::network::{Graph, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SCALES: [f64; 3] = [0.5, 1.0, 1.5];

/// Smallest side length accepted for a rescaled input.
pub const MIN_SCALED_SIDE: usize = 8;

/// Single-channel probability map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    map: Tensor<f32>,
}

impl EdgeMap {
    /// Wraps a `(1, 1, h, w)` tensor with values in `[0, 1]`.
    pub fn new(map: Tensor<f32>) -> Result<Self> {
        let s = map.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Shape(format!(
                "edge map must be (1, 1, h, w), got {s}"
            )));
        }
        if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("edge map values must lie in [0, 1]".into()));
        }
        Ok(EdgeMap { map })
    }

    pub fn from_values(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        EdgeMap::new(Tensor::from_vec(Shape::new(1, 1, h, w), values)?)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.map
    }

    pub fn values(&self) -> &[f32] {
        self.map.data()
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.map.shape().h, self.map.shape().w)
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.map.data()[y * self.map.shape().w + x]
    }
}

/// Sigmoid of the final logit map (last side output).
pub fn predict(graph: &Graph, params: &ParamStore<f32>, image: &Tensor<f32>) -> Result<EdgeMap> {
    if image.shape().n != 1 {
        return Err(Error::Shape(format!(
            "predict takes a single image, got {}",
            image.shape()
        )));
    }
    let out = graph.forward(params, image)?;
    let logits = out.final_logits();
    Ok(EdgeMap {
        map: logits.map(sigmoid_scalar),
    })
}

/// Mean of predictions at several input scales, each resized back to the
/// original size.
pub fn predict_multiscale(
    graph: &Graph,
    params: &ParamStore<f32>,
    image: &Tensor<f32>,
    scales: &[f64],
) -> Result<EdgeMap> {
    if scales.is_empty() {
        return Err(Error::Invalid("at least one scale is required".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Invalid(format!("scales must be positive, got {s}")));
    }
    let s = image.shape();
    let mut acc = vec![0.0f64; s.h * s.w];
    for &scale in scales {
        let (h, w) = scaled_dims(s.h, s.w, scale);
        if h < MIN_SCALED_SIDE || w < MIN_SCALED_SIDE {
            return Err(Error::Invalid(format!(
                "scale {scale} gives a {h}×{w} input; the minimum size is {MIN_SCALED_SIDE}×{MIN_SCALED_SIDE}"
            )));
        }
        let scaled = if (h, w) == (s.h, s.w) {
            image.clone()
        } else {
            kernels::bilinear_resize(image, h, w)?
        };
        let p = predict(graph, params, &scaled)?.map;
        let back = if (h, w) == (s.h, s.w) {
            p
        } else {
            kernels::bilinear_resize(&p, s.h, s.w)?
        };
        for (a, &v) in acc.iter_mut().zip(back.data()) {
            *a += v as f64;
        }
    }
    let k = scales.len() as f64;
    let data = acc
        .iter()
        .map(|&a| ((a / k) as f32).clamp(0.0, 1.0))
        .collect();
    Ok(EdgeMap {
        map: Tensor::from_vec(Shape::new(1, 1, s.h, s.w), data)?,
    })
}

/// Rounded size of an `h × w` input at `scale` (at least 1).
pub fn scaled_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let r = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (r(h), r(w))
}

const GAUSS_SIGMA: f64 = 1.0;
const GAUSS_RADIUS: usize = 2;

/// Oriented non-maximum suppression.
///
/// The map is smoothed with a 5×5 Gaussian (σ = 1). Orientation comes from
/// Sobel derivatives of the smoothed map taken twice: the ridge normal is
/// the principal axis of the resulting Hessian. Each pixel is compared with
/// bilinear samples of the original map one pixel away on either side
/// along the normal and kept only if it is at least as large as both and
/// strictly larger than one of them, where equal samples are ordered by the
/// smoothed map so that the centre line of a flat plateau wins. Kept pixels
/// retain their value; the rest become 0. A constant map thins to all zeros.
pub fn nms_thin(em: &EdgeMap) -> EdgeMap {
    let (h, w) = em.hw();
    let src: Vec<f64> = em.values().iter().map(|&v| v as f64).collect();
    let smooth = gaussian_blur(&src, h, w);
    let (gx, gy) = sobel(&smooth, h, w);
    let (gxx, gxy) = sobel(&gx, h, w);
    let (_, gyy) = sobel(&gy, h, w);

    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = src[i];
            if v <= 0.0 {
                continue;
            }
            let theta = 0.5 * (2.0 * gxy[i]).atan2(gxx[i] - gyy[i]) + std::f64::consts::FRAC_PI_2;
            let (dx, dy) = (theta.cos(), theta.sin());
            let (ya, xa, yb, xb) = (y as f64 + dy, x as f64 + dx, y as f64 - dy, x as f64 - dx);
            // raw values first, smoothed values on exact ties
            let key = |yy: f64, xx: f64| {
                (
                    sample_clamped(&src, h, w, yy, xx),
                    sample_clamped(&smooth, h, w, yy, xx),
                )
            };
            let here = (v, smooth[i]);
            let (a, b) = (key(ya, xa), key(yb, xb));
            if ge(here, a) && ge(here, b) && (here != a || here != b) {
                out[i] = em.values()[i];
            }
        }
    }
    EdgeMap {
        map: Tensor::from_vec(Shape::new(1, 1, h, w), out).expect("same size"),
    }
}

fn ge(p: (f64, f64), q: (f64, f64)) -> bool {
    p.0 > q.0 || (p.0 == q.0 && p.1 >= q.1)
}

fn gaussian_kernel() -> [f64; 2 * GAUSS_RADIUS + 1] {
    let mut k = [0.0; 2 * GAUSS_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - GAUSS_RADIUS as f64;
        *v = (-d * d / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable 5×5 Gaussian with replicated borders.
fn gaussian_blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = GAUSS_RADIUS as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * src[y * w + clamp_idx(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp_idx(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Sobel derivatives `(d/dx, d/dy)` with replicated borders, scaled by 1/8.
fn sobel(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| src[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1))
                / 8.0;
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1))
                / 8.0;
        }
    }
    (gx, gy)
}

/// Bilinear sample with coordinates clamped to the map.
fn sample_clamped(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
    let bot = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
    top + fy * (bot - top)
}
