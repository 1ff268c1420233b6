//! Mini-batch SGD with a step learning-rate schedule.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels;
use crate::loss::{class_weights, GroundTruth, DEFAULT_GAMMA, DEFAULT_THRESHOLD};
use crate::network::{Graph, Mode, ParamStore};
use crate::tape::{backward, Tape, VarId};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    /// Rescales each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub gamma: f64,
    pub th: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            lr_decay: 0.1,
            decay_every: 10,
            batch_size: 3,
            epochs: 60,
            momentum: 0.0,
            clip_norm: None,
            seed: 0,
            gamma: DEFAULT_GAMMA,
            th: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    /// Learning rate for 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every.max(1)) as i32)
    }
}

/// An image with its (fused) ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `(1, 3, h, w)` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub gt: Arc<GroundTruth>,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, gt: GroundTruth, id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || gt.hw() != (s.h, s.w) {
            return Err(Error::Shape(format!(
                "image {s} does not match ground truth {}",
                gt.map().shape()
            )));
        }
        Ok(Sample {
            image,
            gt: Arc::new(gt),
            id: id.into(),
        })
    }
}

pub const AUGMENT_SCALES: [f64; 3] = [0.5, 1.0, 1.5];

/// Horizontal flip × 4 rotations × 3 scales: 24 samples per input, in a
/// fixed order.
pub fn augment(samples: &[Sample]) -> Result<Vec<Sample>> {
    augment_with(samples, &AUGMENT_SCALES)
}

/// Flip × rotation variants at each of `scales`.
pub fn augment_with(samples: &[Sample], scales: &[f64]) -> Result<Vec<Sample>> {
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Invalid(format!(
            "augmentation scales must be positive, got {s}"
        )));
    }
    let mut out = Vec::with_capacity(samples.len() * 8 * scales.len());
    for s in samples {
        for flip in [false, true] {
            let (img0, gt0) = if flip {
                (flip_h(&s.image), flip_h(s.gt.map()))
            } else {
                (s.image.clone(), s.gt.map().clone())
            };
            let (mut img, mut gt) = (img0, gt0);
            for quarter in 0..4 {
                if quarter > 0 {
                    img = rot90(&img);
                    gt = rot90(&gt);
                }
                for &scale in scales {
                    let (si, sg) = rescale(&img, &gt, scale)?;
                    out.push(Sample {
                        image: si,
                        gt: Arc::new(GroundTruth::new(sg)?),
                        id: format!("{}_f{}_r{}_s{}", s.id, flip as u8, quarter * 90, scale),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Mirror along the vertical axis.
pub fn flip_h<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            for row in out.plane_mut(n, c).chunks_exact_mut(s.w) {
                row.reverse();
            }
        }
    }
    out
}

/// Quarter turn clockwise: `out[y][x] = in[h - 1 - x][y]`.
pub fn rot90<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.w, s.h));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.w {
                for xx in 0..s.h {
                    dst[y * s.h + xx] = src[(s.h - 1 - xx) * s.w + y];
                }
            }
        }
    }
    out
}

fn rescale(img: &Tensor<f32>, gt: &Tensor<f32>, scale: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if scale == 1.0 {
        return Ok((img.clone(), gt.clone()));
    }
    let s = img.shape();
    let h = ((s.h as f64 * scale).round() as usize).max(1);
    let w = ((s.w as f64 * scale).round() as usize).max(1);
    let si = kernels::bilinear_resize(img, h, w)?;
    let sg = kernels::bilinear_resize(gt, h, w)?.map(|v| v.clamp(0.0, 1.0));
    Ok((si, sg))
}

pub type Grads<T = f32> = BTreeMap<String, Tensor<T>>;

/// `v ← momentum·v + g; w ← w − lr·v`. Velocity entries are created on
/// first use.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    lr: f64,
    momentum: f64,
    velocity: &mut ParamStore<T>,
) -> Result<()> {
    if let Some(extra) = grads.keys().find(|k| !params.contains(k)) {
        return Err(Error::UnknownParam(extra.clone()));
    }
    let (lr, m) = (T::lit(lr), T::lit(momentum));
    for (name, w) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing gradient for `{name}`")))?;
        if g.shape() != w.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {}, parameter has {}",
                g.shape(),
                w.shape()
            )));
        }
        if !velocity.contains(name) {
            velocity.insert(name, Tensor::zeros(w.shape()));
        }
        let v = velocity.get_mut(name).expect("inserted above");
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = m * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Total loss (every side head plus the fused head) and its parameter
/// gradients for one sample.
/// Records the summed stage losses of every output head on `tape`.
pub fn record_total_loss<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    gt: &Arc<GroundTruth>,
    gamma: f64,
    th: f64,
    tape: &mut Tape<T>,
) -> Result<VarId> {
    let out = graph.forward_taped(params, image, tape)?;
    let weights = class_weights(gt, gamma, th)?;
    let mut total = None;
    for head in out.side_logits.iter().chain(out.fused_logits.iter()) {
        let l = tape.stage_loss(*head, gt.clone(), weights)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    total.ok_or_else(|| Error::Invalid("graph has no output heads".into()))
}

pub fn sample_gradients<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    gt: &Arc<GroundTruth>,
    gamma: f64,
    th: f64,
) -> Result<(f64, Grads<T>)> {
    let mut tape = Tape::new();
    let total = record_total_loss(graph, params, image, gt, gamma, th, &mut tape)?;
    let grads = backward(&tape, total)?;
    Ok((tape.value(total).data()[0].as_f64(), grads.into_params()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over samples of the per-sample total loss, measured before
    /// each sample's batch update.
    pub mean_total_loss: f64,
    /// Largest batch gradient norm seen in the epoch, before clipping.
    pub max_grad_norm: f64,
}

/// CSV rendering with header `epoch,lr,mean_total_loss,max_grad_norm`.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,mean_total_loss,max_grad_norm\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.lr, e.mean_total_loss, e.max_grad_norm
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub log: Vec<EpochLog>,
}

pub fn fit(
    graph: &Graph,
    params: ParamStore<f32>,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    fit_with(graph, params, data, cfg, |_| {})
}

/// Like [`fit`], calling `on_epoch` after every epoch.
///
/// Each epoch shuffles the sample order with a generator seeded from
/// `cfg.seed`, groups samples of equal size into batches, and shuffles the
/// batch order. Within a batch, per-sample gradients are computed in
/// parallel and summed in batch order.
pub fn fit_with(
    graph: &Graph,
    params: ParamStore<f32>,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if graph.mode() != Mode::Train {
        return Err(Error::Invalid("training needs a train-mode graph".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be ≥ 1".into()));
    }
    if let Some(c) = cfg.clip_norm.filter(|c| c.is_nan() || *c <= 0.0) {
        return Err(Error::Invalid(format!("clip norm must be > 0, got {c}")));
    }
    let mut params = params.bind(graph, crate::network::LoadMode::Strict)?;
    let mut velocity = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let batches = epoch_batches(data, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut max_norm = 0.0f64;
        for batch in batches {
            let results: Vec<Result<(f64, Grads)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &data[i];
                    sample_gradients(graph, &params, &s.image, &s.gt, cfg.gamma, cfg.th)
                })
                .collect();
            let mut acc: Option<Grads> = None;
            for (r, &i) in results.into_iter().zip(&batch) {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        sample: data[i].id.clone(),
                    });
                }
                loss_sum += loss;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (k, v) in a.iter_mut() {
                            v.add_assign(&g[k]);
                        }
                    }
                }
            }
            let mut acc = acc.expect("non-empty batch");
            let norm = clip_global_norm(&mut acc, cfg.clip_norm.unwrap_or(f64::INFINITY));
            max_norm = max_norm.max(norm);
            sgd_step(&mut params, &acc, lr, cfg.momentum, &mut velocity)?;
        }
        let entry = EpochLog {
            epoch,
            lr,
            mean_total_loss: loss_sum / data.len() as f64,
            max_grad_norm: max_norm,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

/// Scales `grads` down so their joint L2 norm is at most `max`. Returns
/// the norm before scaling.
pub fn clip_global_norm(grads: &mut Grads, max: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = (max / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

fn epoch_batches(data: &[Sample], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for i in order {
        let s = data[i].image.shape();
        let key = (s.h, s.w);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    let mut batches: Vec<Vec<usize>> = groups
        .into_iter()
        .flat_map(|(_, g)| {
            g.chunks(batch_size)
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect();
    batches.shuffle(rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(9), 0.01);
        assert!((c.lr_at(25) - 1e-4).abs() < 1e-18);
        for e in 0..60 {
            assert_eq!(c.lr_at(e), 0.01 * 0.1f64.powi((e / 10) as i32));
        }
    }

    #[test]
    fn rot90_matches_index_permutation() {
        // 2×3:  a b c      4 1
        //       d e f  ->  5 2
        //                  6 3
        let x = t(Shape::new(1, 1, 2, 3), &[1., 2., 3., 4., 5., 6.]);
        let r = rot90(&x);
        assert_eq!(r.shape(), Shape::new(1, 1, 3, 2));
        assert_eq!(r.data(), &[4., 1., 5., 2., 6., 3.]);
        let full = rot90(&rot90(&rot90(&r)));
        assert_eq!(full, x);
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = t(
            Shape::new(1, 2, 2, 3),
            &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.],
        );
        assert_eq!(flip_h(&x).plane(0, 0), &[3., 2., 1., 6., 5., 4.]);
        assert_eq!(flip_h(&flip_h(&x)), x);
    }

    #[test]
    fn augment_is_24x() {
        let cfg = crate::synth::SceneConfig {
            height: 12,
            width: 8,
            ..Default::default()
        };
        let base = crate::synth::scenes(&cfg, 5, 0);
        let aug = augment(&base).unwrap();
        assert_eq!(aug.len(), 120);
        assert_eq!(aug[1].image, base[0].image);
        assert_eq!(aug[0].image.shape(), Shape::new(1, 3, 6, 4));
        let rotated = &aug[4];
        assert_eq!(rotated.image.shape(), Shape::new(1, 3, 8, 12));
        assert_eq!(rotated.gt.map(), &rot90(base[0].gt.map()));
        assert_eq!(aug[2].image.shape(), Shape::new(1, 3, 18, 12));
        for s in &aug {
            assert_eq!(s.gt.hw(), (s.image.shape().h, s.image.shape().w));
        }
    }

    #[test]
    fn sgd_plain_and_momentum() {
        let sh = Shape::new(1, 1, 1, 2);
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_vec(sh, vec![1.0, -2.0]).unwrap());
        let mut g = Grads::new();
        g.insert(
            "w".to_string(),
            Tensor::from_vec(sh, vec![0.5, 1.0]).unwrap(),
        );
        let mut v = ParamStore::new();
        sgd_step(&mut p, &g, 0.1, 0.0, &mut v).unwrap();
        assert_eq!(
            p.get("w").unwrap().data(),
            &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0]
        );

        // Hand trace with momentum 0.9, lr 0.1, constant g = 0.5:
        // v1 = 0.5, w1 = 1 - 0.05 = 0.95; v2 = 0.45 + 0.5 = 0.95, w2 = 0.95 - 0.095 = 0.855.
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_vec(sh, vec![1.0, 1.0]).unwrap());
        let mut g = Grads::new();
        g.insert("w".to_string(), Tensor::full(sh, 0.5));
        let mut v = ParamStore::new();
        sgd_step(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        sgd_step(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        for &w in p.get("w").unwrap().data() {
            assert!((w - 0.855).abs() < 1e-15, "{w}");
        }
        assert!((v.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);

        let zero = Grads::from([("w".to_string(), Tensor::zeros(sh))]);
        let before = p.clone();
        sgd_step(&mut p, &zero, 0.1, 0.0, &mut ParamStore::new()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_key_errors() {
        let sh = Shape::new(1, 1, 1, 1);
        let mut p = ParamStore::<f32>::new();
        p.insert("a", Tensor::zeros(sh));
        p.insert("b", Tensor::zeros(sh));
        let g = Grads::from([("a".to_string(), Tensor::zeros(sh))]);
        assert!(sgd_step(&mut p, &g, 0.1, 0.0, &mut ParamStore::new()).is_err());
        let g = Grads::from([
            ("a".to_string(), Tensor::zeros(sh)),
            ("b".to_string(), Tensor::zeros(sh)),
            ("c".to_string(), Tensor::zeros(sh)),
        ]);
        assert!(sgd_step(&mut p, &g, 0.1, 0.0, &mut ParamStore::new()).is_err());
    }

    #[test]
    fn fit_rejects_empty_and_inference_graph() {
        use crate::network::{init_params, NetworkSpec};
        let spec = NetworkSpec::fined2(Mode::Train);
        let g = Graph::build(&spec).unwrap();
        let p = init_params(&spec, 0).unwrap();
        assert!(matches!(
            fit(&g, p.clone(), &[], &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let inf = Graph::build(&spec.with_mode(Mode::Inference)).unwrap();
        let data = crate::synth::scenes(&Default::default(), 1, 0);
        assert!(fit(&inf, p, &data, &TrainConfig::default()).is_err());
    }
}
