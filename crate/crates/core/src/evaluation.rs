//! Boundary benchmark: annotation fusion, tolerance matching, precision,
//! recall and the ODS / OIS summaries.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{nms_thin, EdgeMap};
use crate::io::write_atomic;
use crate::loss::GroundTruth;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 0.0075;
pub const DEFAULT_THRESHOLDS: usize = 99;

/// Pixel correspondence strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Matching {
    /// Pairs accepted in ascending distance order (ties broken row-major)
    /// whenever both pixels are still free.
    Greedy,
    /// The greedy pairing extended by augmenting paths to a maximum
    /// cardinality matching.
    #[default]
    Maximum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Maximum match distance as a fraction of the image diagonal.
    pub tolerance: f64,
    /// Strictly increasing, inside `(0, 1)`.
    pub thresholds: Vec<f64>,
    pub thin_before_eval: bool,
    pub matching: Matching,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tolerance: DEFAULT_TOLERANCE,
            thresholds: uniform_thresholds(DEFAULT_THRESHOLDS),
            thin_before_eval: true,
            matching: Matching::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Invalid(format!(
                "tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Invalid("at least one threshold is required".into()));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Invalid(
                "thresholds must be strictly increasing inside (0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Match radius in pixels for an `h × w` image.
    pub fn max_dist(&self, h: usize, w: usize) -> f64 {
        self.tolerance * ((h * h + w * w) as f64).sqrt()
    }
}

/// `n` evenly spaced thresholds `k / (n + 1)`, `k = 1..=n`.
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
}

/// Binary edge map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMap {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!(
                "{} bits for a {h}×{w} map",
                bits.len()
            )));
        }
        Ok(BinaryMap { h, w, bits })
    }

    /// From a single-channel tensor holding only 0 and 1.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Shape(format!(
                "binary map must be (1, 1, h, w), got {s}"
            )));
        }
        if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!(
                "binary map holds non-binary value {v}"
            )));
        }
        Ok(BinaryMap {
            h: s.h,
            w: s.w,
            bits: t.data().iter().map(|&v| v == 1.0).collect(),
        })
    }

    /// Pixels with probability at least `t`.
    pub fn threshold(em: &EdgeMap, t: f64) -> Self {
        let (h, w) = em.hw();
        BinaryMap {
            h,
            w,
            bits: em.values().iter().map(|&v| v as f64 >= t).collect(),
        }
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.bits.iter().map(|&b| b as u8 as f32).collect();
        Tensor::from_vec(Shape::new(1, 1, self.h, self.w), data).expect("size checked")
    }
}

/// Pixelwise mean of the annotators' maps.
pub fn fuse_annotations(maps: &[BinaryMap]) -> Result<GroundTruth> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Invalid("no annotation maps to fuse".into()))?;
    let (h, w) = first.hw();
    if let Some(m) = maps.iter().find(|m| m.hw() != (h, w)) {
        return Err(Error::Shape(format!(
            "annotation of size {}×{} differs from {h}×{w}",
            m.h, m.w
        )));
    }
    let k = maps.len() as f32;
    let values = (0..h * w)
        .map(|i| maps.iter().filter(|m| m.bits[i]).count() as f32 / k)
        .collect();
    GroundTruth::from_values(h, w, values)
}

/// One-to-one correspondence between predicted and ground-truth pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub matched_pred: usize,
    pub matched_gt: usize,
    /// Per-pixel flags, row-major.
    pub pred_mask: Vec<bool>,
    pub gt_mask: Vec<bool>,
    /// Matched `(pred_pixel, gt_pixel)` flat indices.
    pub pairs: Vec<(usize, usize)>,
}

/// Matches edge pixels of `pred` and `gt` lying within `max_dist` pixels
/// (Euclidean) of each other.
pub fn match_edges(
    pred: &BinaryMap,
    gt: &BinaryMap,
    max_dist: f64,
    matching: Matching,
) -> Result<MatchResult> {
    if pred.hw() != gt.hw() {
        return Err(Error::Shape(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    if max_dist.is_nan() || max_dist < 0.0 {
        return Err(Error::Invalid(format!(
            "match distance must be ≥ 0, got {max_dist}"
        )));
    }
    let (h, w) = pred.hw();
    let p_pix: Vec<usize> = (0..h * w).filter(|&i| pred.bits[i]).collect();
    let mut g_index = vec![usize::MAX; h * w];
    let g_pix: Vec<usize> = (0..h * w).filter(|&i| gt.bits[i]).collect();
    for (k, &i) in g_pix.iter().enumerate() {
        g_index[i] = k;
    }

    // Candidate pairs within range, with squared integer distances.
    let r = max_dist.floor() as isize;
    let r2 = max_dist * max_dist;
    let mut adj: Vec<Vec<(usize, usize)>> = Vec::with_capacity(p_pix.len());
    for &pi in &p_pix {
        let (py, px) = ((pi / w) as isize, (pi % w) as isize);
        let mut near = Vec::new();
        for dy in -r..=r {
            let y = py + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in -r..=r {
                let x = px + dx;
                let d2 = (dy * dy + dx * dx) as usize;
                if x < 0 || x >= w as isize || d2 as f64 > r2 {
                    continue;
                }
                let gk = g_index[y as usize * w + x as usize];
                if gk != usize::MAX {
                    near.push((d2, gk));
                }
            }
        }
        near.sort_unstable();
        adj.push(near);
    }

    let mut cand: Vec<(usize, usize, usize)> = adj
        .iter()
        .enumerate()
        .flat_map(|(pk, near)| near.iter().map(move |&(d2, gk)| (d2, pk, gk)))
        .collect();
    cand.sort_unstable();
    let mut mate_p = vec![usize::MAX; p_pix.len()];
    let mut mate_g = vec![usize::MAX; g_pix.len()];
    for (_, pk, gk) in cand {
        if mate_p[pk] == usize::MAX && mate_g[gk] == usize::MAX {
            mate_p[pk] = gk;
            mate_g[gk] = pk;
        }
    }
    if matching == Matching::Maximum {
        let adj_g: Vec<Vec<usize>> = adj
            .iter()
            .map(|v| v.iter().map(|&(_, g)| g).collect())
            .collect();
        hopcroft_karp(&adj_g, &mut mate_p, &mut mate_g);
    }

    let mut pred_mask = vec![false; h * w];
    let mut gt_mask = vec![false; h * w];
    let mut pairs = Vec::new();
    for (pk, &gk) in mate_p.iter().enumerate() {
        if gk != usize::MAX {
            pred_mask[p_pix[pk]] = true;
            gt_mask[g_pix[gk]] = true;
            pairs.push((p_pix[pk], g_pix[gk]));
        }
    }
    Ok(MatchResult {
        matched_pred: pairs.len(),
        matched_gt: pairs.len(),
        pred_mask,
        gt_mask,
        pairs,
    })
}

/// Grows the matching `mate_p` / `mate_g` to maximum cardinality.
fn hopcroft_karp(adj: &[Vec<usize>], mate_p: &mut [usize], mate_g: &mut [usize]) {
    const FREE: usize = usize::MAX;
    let n = adj.len();
    let mut dist = vec![usize::MAX; n];
    let mut it = vec![0usize; n];
    loop {
        // Layer the free predicted pixels and their alternating paths.
        let mut queue = VecDeque::new();
        for p in 0..n {
            if mate_p[p] == FREE {
                dist[p] = 0;
                queue.push_back(p);
            } else {
                dist[p] = usize::MAX;
            }
        }
        let mut found = false;
        while let Some(p) = queue.pop_front() {
            for &g in &adj[p] {
                match mate_g[g] {
                    FREE => found = true,
                    q if dist[q] == usize::MAX => {
                        dist[q] = dist[p] + 1;
                        queue.push_back(q);
                    }
                    _ => {}
                }
            }
        }
        if !found {
            return;
        }
        it.fill(0);
        for root in 0..n {
            if mate_p[root] != FREE {
                continue;
            }
            let mut stack = vec![root];
            let mut via: Vec<usize> = Vec::new();
            while let Some(&p) = stack.last() {
                if it[p] == adj[p].len() {
                    dist[p] = usize::MAX;
                    stack.pop();
                    via.pop();
                    continue;
                }
                let g = adj[p][it[p]];
                it[p] += 1;
                match mate_g[g] {
                    FREE => {
                        via.push(g);
                        for (&pp, &gg) in stack.iter().zip(&via) {
                            mate_p[pp] = gg;
                            mate_g[gg] = pp;
                        }
                        break;
                    }
                    q if dist[q] == dist[p] + 1 => {
                        via.push(g);
                        stack.push(q);
                    }
                    _ => {}
                }
            }
        }
    }
}

/// Count quadruple for pooling: matched / total predicted pixels and
/// matched / total ground-truth pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp_p: usize,
    pub n_p: usize,
    pub tp_g: usize,
    pub n_g: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp_p: self.tp_p + o.tp_p,
            n_p: self.n_p + o.n_p,
            tp_g: self.tp_g + o.tp_g,
            n_g: self.n_g + o.n_g,
        }
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp_p, self.n_p)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp_g, self.n_g)
    }

    pub fn f(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Counts for an already binarised prediction. A predicted pixel is a hit
/// if any annotator's map matches it; recall pools every annotator's
/// pixels.
pub fn binary_counts(
    pred: &BinaryMap,
    gts: &[BinaryMap],
    max_dist: f64,
    matching: Matching,
) -> Result<Counts> {
    let mut hit = vec![false; pred.bits.len()];
    let mut c = Counts {
        n_p: pred.count(),
        ..Counts::default()
    };
    for gt in gts {
        let m = match_edges(pred, gt, max_dist, matching)?;
        c.tp_g += m.matched_gt;
        c.n_g += gt.count();
        for (h, &b) in hit.iter_mut().zip(&m.pred_mask) {
            *h |= b;
        }
    }
    c.tp_p = hit.iter().filter(|&&b| b).count();
    Ok(c)
}

/// Counts at one threshold, thinning first if configured.
pub fn pr_at_threshold(
    pred: &EdgeMap,
    gts: &[BinaryMap],
    t: f64,
    cfg: &EvalConfig,
) -> Result<Counts> {
    let thinned;
    let map = if cfg.thin_before_eval {
        thinned = nms_thin(pred);
        &thinned
    } else {
        pred
    };
    let (h, w) = map.hw();
    binary_counts(
        &BinaryMap::threshold(map, t),
        gts,
        cfg.max_dist(h, w),
        cfg.matching,
    )
}

/// Per-threshold counts of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub id: String,
    pub counts: Vec<Counts>,
}

pub fn evaluate_image(
    id: impl Into<String>,
    pred: &EdgeMap,
    gts: &[BinaryMap],
    cfg: &EvalConfig,
) -> Result<ImageResult> {
    let thinned;
    let map = if cfg.thin_before_eval {
        thinned = nms_thin(pred);
        &thinned
    } else {
        pred
    };
    let (h, w) = map.hw();
    if let Some(g) = gts.iter().find(|g| g.hw() != (h, w)) {
        return Err(Error::Shape(format!(
            "ground truth {}×{} vs prediction {h}×{w}",
            g.h, g.w
        )));
    }
    let d = cfg.max_dist(h, w);
    let counts = cfg
        .thresholds
        .iter()
        .map(|&t| binary_counts(&BinaryMap::threshold(map, t), gts, d, cfg.matching))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageResult {
        id: id.into(),
        counts,
    })
}

/// Evaluates `(id, prediction, annotations)` triples in parallel and
/// summarises them.
pub fn evaluate_dataset(
    items: &[(String, EdgeMap, Vec<BinaryMap>)],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let results = items
        .par_iter()
        .map(|(id, em, gts)| evaluate_image(id.clone(), em, gts, cfg))
        .collect::<Result<Vec<_>>>()?;
    ods_ois(&results, &cfg.thresholds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageBest {
    pub id: String,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Dataset-pooled precision / recall / F per threshold.
    pub thresholds: Vec<ThresholdRow>,
    pub ods_f: f64,
    pub ods_threshold: f64,
    pub ois_f: f64,
    pub images: Vec<ImageBest>,
}

/// ODS: best F of counts pooled over all images at one shared threshold.
/// OIS: mean of every image's own best F. Ties go to the lowest threshold.
pub fn ods_ois(results: &[ImageResult], thresholds: &[f64]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(r) = results.iter().find(|r| r.counts.len() != thresholds.len()) {
        return Err(Error::Shape(format!(
            "image `{}` has {} threshold entries, expected {}",
            r.id,
            r.counts.len(),
            thresholds.len()
        )));
    }
    let rows: Vec<ThresholdRow> = thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let c = results
                .iter()
                .fold(Counts::default(), |acc, r| acc + r.counts[k]);
            ThresholdRow {
                threshold: t,
                precision: c.precision(),
                recall: c.recall(),
                f: c.f(),
            }
        })
        .collect();
    let ods = argmax_first(rows.iter().map(|r| r.f));
    let images: Vec<ImageBest> = results
        .iter()
        .map(|r| {
            let k = argmax_first(r.counts.iter().map(Counts::f));
            let c = r.counts[k];
            ImageBest {
                id: r.id.clone(),
                threshold: thresholds[k],
                precision: c.precision(),
                recall: c.recall(),
                f: c.f(),
            }
        })
        .collect();
    let mut best: Vec<f64> = images.iter().map(|i| i.f).collect();
    best.sort_by(f64::total_cmp);
    let ois = best.iter().sum::<f64>() / best.len() as f64;
    Ok(EvalReport {
        ods_f: rows[ods].f,
        ods_threshold: rows[ods].threshold,
        ois_f: ois,
        thresholds: rows,
        images,
    })
}

fn argmax_first(vals: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in vals.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `threshold,precision,recall,f` rows.
pub fn pr_csv(report: &EvalReport) -> String {
    let mut s = String::from("threshold,precision,recall,f\n");
    for r in &report.thresholds {
        let _ = writeln!(s, "{},{},{},{}", r.threshold, r.precision, r.recall, r.f);
    }
    s
}

/// Precision over recall, with the ODS point marked.
pub fn pr_svg(report: &EvalReport) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let px = |r: f64| PAD + r * SIZE;
    let py = |p: f64| PAD + (1.0 - p) * SIZE;
    let mut s = String::new();
    let total = SIZE + 2.0 * PAD;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for k in 0..=10 {
        let v = k as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{x}" y1="{y0}" x2="{x}" y2="{y1}" stroke="#ddd"/><line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##,
            x = px(v),
            y = py(v),
            x0 = px(0.0),
            x1 = px(1.0),
            y0 = py(0.0),
            y1 = py(1.0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
            px(v),
            py(0.0) + 16.0,
            px(0.0) - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Recall</text><text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">Precision</text>"#,
        px(0.5),
        total - 8.0,
        py(0.5),
        py(0.5)
    );
    let pts: Vec<String> = report
        .thresholds
        .iter()
        .filter(|r| r.precision > 0.0 || r.recall > 0.0)
        .map(|r| format!("{:.2},{:.2}", px(r.recall), py(r.precision)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#c00" stroke-width="2"/>"##,
        pts.join(" ")
    );
    if let Some(best) = report
        .thresholds
        .iter()
        .find(|r| r.threshold == report.ods_threshold)
    {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#c00"/>"##,
            px(best.recall),
            py(best.precision)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="30" text-anchor="middle">ODS F = {:.3} (t = {:.2}), OIS F = {:.3}</text>"#,
        px(0.5),
        report.ods_f,
        report.ods_threshold,
        report.ois_f
    );
    s.push_str("</svg>\n");
    s
}

pub fn summary_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialises")
}

/// Writes the CSV to `csv_path` and the SVG next to it (`.svg` extension).
pub fn pr_curve(report: &EvalReport, csv_path: impl AsRef<Path>) -> Result<()> {
    if report.thresholds.is_empty() {
        return Err(Error::Invalid("empty report".into()));
    }
    let csv_path = csv_path.as_ref();
    write_atomic(csv_path, pr_csv(report).as_bytes())?;
    write_atomic(&csv_path.with_extension("svg"), pr_svg(report).as_bytes())
}
