//! Class-balanced cross-entropy with a weak-edge ignore band.
//!
//! Each pixel with ground truth `y` and logit `p` contributes
//!
//! ```text
//! y == 0        ->  alpha * -log(1 - sigmoid(p))
//! 0 < y < th    ->  0
//! y >= th       ->  beta  * -log(sigmoid(p))
//! ```
//!
//! with `alpha = gamma * Y+ / Y`, `beta = Y- / Y`, where `Y+` counts pixels
//! with `y >= th`, `Y-` counts pixels with `y == 0` and `Y = Y+ + Y-`.
//! Pixels inside the ignore band are excluded from all three counts.

use crate::error::{Error, Result};
use crate::kernels::sigmoid_scalar;
use crate::tensor::{Scalar, Shape, Tensor};

pub const DEFAULT_GAMMA: f64 = 1.1;
pub const DEFAULT_THRESHOLD: f64 = 0.25;

/// Single-channel annotator-consensus map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    map: Tensor<f32>,
}

impl GroundTruth {
    pub fn new(map: Tensor<f32>) -> Result<Self> {
        let s = map.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Shape(format!(
                "ground truth must be a single (1, 1, h, w) map, got {s}"
            )));
        }
        if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!(
                "ground-truth value {v} outside [0, 1]"
            )));
        }
        Ok(GroundTruth { map })
    }

    pub fn from_values(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        GroundTruth::new(Tensor::from_vec(Shape::new(1, 1, h, w), values)?)
    }

    pub fn map(&self) -> &Tensor<f32> {
        &self.map
    }

    pub fn values(&self) -> &[f32] {
        self.map.data()
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.map.shape().h, self.map.shape().w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    /// Weight of the non-edge (`y == 0`) term.
    pub alpha: f64,
    /// Weight of the edge (`y >= th`) term.
    pub beta: f64,
    pub gamma: f64,
    pub th: f64,
}

impl ClassWeights {
    /// Weights given directly, bypassing the pixel counts.
    pub fn fixed(alpha: f64, beta: f64, th: f64) -> Self {
        ClassWeights {
            alpha,
            beta,
            gamma: f64::NAN,
            th,
        }
    }
}

/// Per-image class balancing weights.
pub fn class_weights(gt: &GroundTruth, gamma: f64, th: f64) -> Result<ClassWeights> {
    let (mut pos, mut neg) = (0usize, 0usize);
    for &y in gt.values() {
        let y = y as f64;
        if y == 0.0 {
            neg += 1;
        } else if y >= th {
            pos += 1;
        }
    }
    let total = pos + neg;
    if total == 0 {
        return Err(Error::NoCountablePixels);
    }
    let total = total as f64;
    Ok(ClassWeights {
        alpha: gamma * pos as f64 / total,
        beta: neg as f64 / total,
        gamma,
        th,
    })
}

/// `log(1 + exp(x))` without overflow.
#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Non-negative loss of one pixel.
#[inline]
pub fn pixel_loss<T: Scalar>(p: T, y: f64, w: &ClassWeights) -> T {
    if y == 0.0 {
        T::lit(w.alpha) * softplus(p)
    } else if y < w.th {
        T::zero()
    } else {
        T::lit(w.beta) * softplus(-p)
    }
}

/// Derivative of [`pixel_loss`] with respect to the logit.
#[inline]
pub fn pixel_loss_grad<T: Scalar>(p: T, y: f64, w: &ClassWeights) -> T {
    if y == 0.0 {
        T::lit(w.alpha) * sigmoid_scalar(p)
    } else if y < w.th {
        T::zero()
    } else {
        T::lit(w.beta) * (sigmoid_scalar(p) - T::one())
    }
}

fn check_map<T: Scalar>(logits: &Tensor<T>, gt: &GroundTruth) -> Result<()> {
    let s = logits.shape();
    if s != gt.map().shape() {
        return Err(Error::Shape(format!(
            "logit map {s} does not match ground truth {}",
            gt.map().shape()
        )));
    }
    Ok(())
}

/// Sum of pixel losses over one logit map.
pub fn stage_loss<T: Scalar>(logits: &Tensor<T>, gt: &GroundTruth, w: &ClassWeights) -> Result<T> {
    check_map(logits, gt)?;
    Ok(logits
        .data()
        .iter()
        .zip(gt.values())
        .map(|(&p, &y)| pixel_loss(p, y as f64, w))
        .sum())
}

pub fn stage_loss_grad<T: Scalar>(
    logits: &Tensor<T>,
    gt: &GroundTruth,
    w: &ClassWeights,
) -> Result<Tensor<T>> {
    check_map(logits, gt)?;
    let data = logits
        .data()
        .iter()
        .zip(gt.values())
        .map(|(&p, &y)| pixel_loss_grad(p, y as f64, w))
        .collect();
    Tensor::from_vec(logits.shape(), data)
}

/// Sum of stage losses over every side output plus the fused output.
pub fn total_loss<T: Scalar>(
    outputs: &crate::network::ForwardOutputs<T>,
    gt: &GroundTruth,
    w: &ClassWeights,
) -> Result<T> {
    let fused = outputs.fused_logits.as_ref().ok_or_else(|| {
        Error::Invalid("total_loss needs train-mode outputs with a fused head".into())
    })?;
    let mut acc = T::zero();
    for side in &outputs.side_logits {
        acc += stage_loss(side, gt, w)?;
    }
    acc += stage_loss(fused, gt, w)?;
    Ok(acc)
}
