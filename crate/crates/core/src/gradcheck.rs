//! Central finite-difference verification of tape gradients.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{GroundTruth, DEFAULT_GAMMA, DEFAULT_THRESHOLD};
use crate::network::{init_params_with, Graph, Init, NetworkSpec, ParamStore};
use crate::tape::{backward, Tape, VarId};
use crate::tensor::{Shape, Tensor};
use crate::trainer::record_total_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation `h` in `(f(w + h) - f(w - h)) / 2h`.
    pub eps: f64,
    /// Number of distinct parameter elements to check.
    pub samples: usize,
    pub seed: u64,
    /// Parameters excluded from checking.
    pub frozen: BTreeSet<String>,
    pub gamma: f64,
    pub th: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            samples: 200,
            seed: 0,
            frozen: BTreeSet::new(),
            gamma: DEFAULT_GAMMA,
            th: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// The perturbation flipped a relu sign or a max-pool winner, so the
    /// finite difference straddles a kink and is not a valid reference.
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub elements: Vec<ElementCheck>,
    /// One entry per parameter tensor, in store order.
    pub params: Vec<ParamSummary>,
    /// Over smooth elements only.
    pub max_rel_err: f64,
    /// Number of elements whose perturbation crossed a kink.
    pub kinks: usize,
}

impl GradCheckReport {
    /// Elements compared against a valid finite difference.
    pub fn smooth(&self) -> impl Iterator<Item = &ElementCheck> {
        self.elements.iter().filter(|e| !e.kink)
    }
}

/// `|a - n| / max(|a|, |n|)`, and 0 when the two agree exactly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic == numeric {
        0.0
    } else {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
    }
}

/// Checks the gradient of a scalar objective recorded by `objective`.
///
/// Elements are drawn by picking a non-frozen tensor uniformly, then an
/// element of it uniformly, without repeats. Elements whose perturbation
/// crosses a kink are kept in the report but do not count towards
/// `samples`; drawing continues until `samples` smooth elements are
/// checked or the parameters run out.
pub fn grad_check_fn<F>(
    params: &ParamStore<f64>,
    objective: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<VarId>,
{
    if cfg.eps.is_nan() || cfg.eps <= 0.0 {
        return Err(Error::Invalid(format!("eps must be > 0, got {}", cfg.eps)));
    }
    if let Some(f) = cfg.frozen.iter().find(|f| !params.contains(f)) {
        return Err(Error::UnknownParam(f.clone()));
    }
    let mut tape = Tape::new();
    let loss = objective(params, &mut tape)?;
    let grads = backward(&tape, loss)?;

    let active: Vec<(&str, usize)> = params
        .iter()
        .filter(|(n, _)| !cfg.frozen.contains(*n))
        .map(|(n, t)| (n, t.numel()))
        .collect();
    let available: usize = active.iter().map(|(_, n)| n).sum();
    let pattern0 = tape.activation_pattern();
    let eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let l = objective(store, &mut t)?;
        Ok((t.value(l).data()[0], t.activation_pattern()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut work = params.clone();
    let mut elements = Vec::new();
    let mut smooth = 0;
    while smooth < cfg.samples && picked.len() < available {
        let k = rng.random_range(0..active.len());
        let i = rng.random_range(0..active[k].1);
        if !picked.insert((k, i)) {
            continue;
        }
        let name = active[k].0;
        let w0 = params.get(name).expect("active names exist").data()[i];
        let set = |store: &mut ParamStore<f64>, v: f64| {
            store.get_mut(name).expect("active names exist").data_mut()[i] = v;
        };
        set(&mut work, w0 + cfg.eps);
        let (plus, pat_plus) = eval(&work)?;
        set(&mut work, w0 - cfg.eps);
        let (minus, pat_minus) = eval(&work)?;
        set(&mut work, w0);
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let analytic = grads
            .param(name)
            .map(|g| g.data()[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let kink = pat_plus != pattern0 || pat_minus != pattern0;
        smooth += !kink as usize;
        elements.push(ElementCheck {
            param: name.to_string(),
            index: i,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
            kink,
        });
    }

    let summaries = params
        .names()
        .map(|n| {
            let mine: Vec<&ElementCheck> = elements
                .iter()
                .filter(|e| e.param == n && !e.kink)
                .collect();
            ParamSummary {
                name: n.to_string(),
                checked: mine.len(),
                max_rel_err: mine.iter().map(|e| e.rel_err).fold(0.0, f64::max),
                frozen: cfg.frozen.contains(n),
            }
        })
        .collect();
    let max_rel_err = elements
        .iter()
        .filter(|e| !e.kink)
        .map(|e| e.rel_err)
        .fold(0.0, f64::max);
    let kinks = elements.iter().filter(|e| e.kink).count();
    Ok(GradCheckReport {
        elements,
        params: summaries,
        max_rel_err,
        kinks,
    })
}

/// Checks the gradient of the summed stage losses of `graph` (every side
/// output, plus the fused output in train mode) on one image.
pub fn grad_check(
    graph: &Graph,
    params: &ParamStore<f64>,
    image: &Tensor<f64>,
    gt: &GroundTruth,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let gt = Arc::new(gt.clone());
    let objective = |store: &ParamStore<f64>, tape: &mut Tape<f64>| {
        record_total_loss(graph, store, image, &gt, cfg.gamma, cfg.th, tape)
    };
    grad_check_fn(params, objective, cfg)
}

/// A random check problem: He-initialised weights for `spec`, a uniform
/// `3×size×size` image and a ground truth that mixes edges, background and
/// ignored soft labels.
pub fn random_problem(
    spec: &NetworkSpec,
    size: usize,
    seed: u64,
) -> Result<(ParamStore<f64>, Tensor<f64>, GroundTruth)> {
    let params = init_params_with(spec, seed, Init::He)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = Shape::new(1, spec.in_channels, size, size);
    let image = Tensor::from_vec(
        shape,
        (0..shape.numel()).map(|_| rng.random::<f64>()).collect(),
    )?;
    let gt = (0..size * size)
        .map(|_| match rng.random_range(0..25) {
            0..=2 => 1.0,
            3 => 0.1,
            4 => 0.6,
            _ => 0.0,
        })
        .collect();
    Ok((params, image, GroundTruth::from_values(size, size, gt)?))
}
