//! Synthetic shape scenes with exact boundary labels.
//!
//! Each scene is a flat background with a few filled rectangles and
//! ellipses painted on top of each other. Region colours differ in
//! luminance, and a pixel is an edge when one of its 4-neighbours lies in a
//! darker region. Every visible outline thus becomes a 1-pixel curve on
//! its brighter side, which can be located from the image alone.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::GroundTruth;
use crate::tensor::{Shape, Tensor};
use crate::trainer::Sample;

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub shapes: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Minimum gap in pixels between any shape and the image border.
    pub margin: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            shapes: 3,
            noise: 0.02,
            margin: 4,
        }
    }
}

/// Renders one scene. Deterministic in `seed`.
pub fn scene(cfg: &SceneConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut label = vec![0u8; h * w];
    let mut colors = vec![random_color(&mut rng)];

    for k in 0..cfg.shapes {
        let color = loop {
            let c = random_color(&mut rng);
            if colors
                .iter()
                .all(|p| (luminance(p) - luminance(&c)).abs() > MIN_LUMA_GAP)
            {
                break c;
            }
        };
        colors.push(color);
        let id = (k + 1) as u8;
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let m = cfg.margin as f64;
        let ry = (rng.random_range(0.12..0.3) * h as f64)
            .min(cy - m)
            .min(h as f64 - m - cy);
        let rx = (rng.random_range(0.12..0.3) * w as f64)
            .min(cx - m)
            .min(w as f64 - m - cx);
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    label[y * w + x] = id;
                }
            }
        }
    }

    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    #[allow(clippy::needless_range_loop)]
    for c in 0..3 {
        let plane = image.plane_mut(0, c);
        for (v, &l) in plane.iter_mut().zip(&label) {
            let noise = if cfg.noise > 0.0 {
                cfg.noise * standard_normal(&mut rng)
            } else {
                0.0
            };
            *v = (colors[l as usize][c] + noise).clamp(0.0, 1.0) as f32;
        }
    }

    let luma: Vec<f64> = colors.iter().map(luminance).collect();
    let edges = boundary(&label, &luma, h, w);
    let gt = GroundTruth::from_values(h, w, edges.iter().map(|&e| e as u8 as f32).collect())
        .expect("binary labels are valid ground truth");
    Sample {
        image,
        gt: Arc::new(gt),
        id: format!("scene{seed}"),
    }
}

/// `count` scenes with seeds `seed, seed + 1, …`.
pub fn scenes(cfg: &SceneConfig, count: usize, seed: u64) -> Vec<Sample> {
    (0..count).map(|i| scene(cfg, seed + i as u64)).collect()
}

/// Pixels with a 4-neighbour whose region is darker (`luma` is indexed by
/// label).
pub fn boundary(label: &[u8], luma: &[f64], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = luma[label[y * w + x] as usize];
            let lower = |yy: usize, xx: usize| luma[label[yy * w + xx] as usize] < l;
            out[y * w + x] = (y > 0 && lower(y - 1, x))
                || (y + 1 < h && lower(y + 1, x))
                || (x > 0 && lower(y, x - 1))
                || (x + 1 < w && lower(y, x + 1));
        }
    }
    out
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.05..0.95))
}

const MIN_LUMA_GAP: f64 = 0.12;

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_lies_on_the_brighter_side() {
        let mut label = vec![0u8; 36];
        for y in 1..5 {
            for x in 1..5 {
                label[y * 6 + x] = 1;
            }
        }
        let b = boundary(&label, &[0.2, 0.8], 6, 6);
        assert_eq!(b.iter().filter(|&&e| e).count(), 12);
        assert!(!b[2 * 6 + 2] && !b[0]);
        assert!(b[6 + 1] && b[4 * 6 + 4]);

        // Dark square on a bright background: the ring moves outside.
        let b = boundary(&label, &[0.8, 0.2], 6, 6);
        assert_eq!(b.iter().filter(|&&e| e).count(), 16);
        assert!(b[1] && !b[0] && !b[6 + 1]);
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = SceneConfig::default();
        let a = scene(&cfg, 3);
        let b = scene(&cfg, 3);
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt.values(), b.gt.values());
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let edges = a.gt.values().iter().filter(|&&v| v == 1.0).count();
        assert!(edges > 30, "only {edges} edge pixels");
        let m = cfg.margin - 1;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if y < m || x < m || y >= cfg.height - m || x >= cfg.width - m {
                    assert_eq!(a.gt.map().at(0, 0, y, x), 0.0, "edge at ({y}, {x})");
                }
            }
        }
        assert_ne!(scene(&cfg, 4).image, a.image);
    }
}
