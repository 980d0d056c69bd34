//! Detection and cover-map evaluation.
//!
//! Point matching is one-to-one: among all matchings that pair the most
//! predictions with references within `max_dist`, the one with the smallest
//! total distance is returned. It is solved exactly as a min-cost max-flow
//! per connected component of the "within reach" graph.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::to_cover;
use crate::peakdetect::PointSet;
use crate::raster::Grid;

/// Smallest evaluation window side in meters.
pub const MIN_WINDOW_M: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub reference: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// Sorted by prediction index.
    pub pairs: Vec<MatchPair>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_ref: Vec<usize>,
    pub max_dist: f64,
}

pub fn match_points(pred: &PointSet, reference: &PointSet, max_dist: f64) -> Result<Matching> {
    if !(max_dist > 0.0) || !max_dist.is_finite() {
        return Err(Error::InvalidParam(format!(
            "max_dist must be positive, got {max_dist}"
        )));
    }
    pred.check_crs(&reference.crs_id)?;
    let np = pred.len();
    let edges = candidate_edges(pred, reference, max_dist);

    // Connected components over pred nodes 0..np and ref nodes np..
    let mut uf = UnionFind::new(np + reference.len());
    for &(i, j, _) in &edges {
        uf.union(i, np + j);
    }
    let mut comp_of: HashMap<usize, usize> = HashMap::new();
    let mut comps: Vec<Vec<(usize, usize, f64)>> = Vec::new();
    for &e in &edges {
        let root = uf.find(e.0);
        let id = *comp_of.entry(root).or_insert_with(|| {
            comps.push(Vec::new());
            comps.len() - 1
        });
        comps[id].push(e);
    }

    let mut pairs: Vec<MatchPair> = comps.par_iter().flat_map_iter(|c| solve_component(c)).collect();
    pairs.sort_by_key(|p| p.pred);

    let mut pred_used = vec![false; np];
    let mut ref_used = vec![false; reference.len()];
    for p in &pairs {
        pred_used[p.pred] = true;
        ref_used[p.reference] = true;
    }
    Ok(Matching {
        pairs,
        unmatched_pred: (0..np).filter(|&i| !pred_used[i]).collect(),
        unmatched_ref: (0..reference.len()).filter(|&j| !ref_used[j]).collect(),
        max_dist,
    })
}

/// All (pred, ref, distance) with distance ≤ max_dist, sorted by (pred, ref).
fn candidate_edges(pred: &PointSet, reference: &PointSet, max_dist: f64) -> Vec<(usize, usize, f64)> {
    let cell = |x: f64| (x / max_dist).floor() as i64;
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, r) in reference.points.iter().enumerate() {
        buckets.entry((cell(r.x), cell(r.y))).or_default().push(j);
    }
    let mut edges: Vec<(usize, usize, f64)> = pred
        .points
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, p)| {
            let (cx, cy) = (cell(p.x), cell(p.y));
            let mut out = Vec::new();
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(js) = buckets.get(&(cx + dx, cy + dy)) {
                        for &j in js {
                            let d = p.distance(&reference.points[j]);
                            if d <= max_dist {
                                out.push((i, j, d));
                            }
                        }
                    }
                }
            }
            out.sort_by_key(|e| e.1);
            out
        })
        .collect();
    edges.sort_by_key(|e| (e.0, e.1));
    edges
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

#[derive(Clone, Copy)]
struct Arc {
    to: usize,
    rev: usize,
    cap: i32,
    cost: f64,
}

#[derive(PartialEq)]
struct Queued(f64, usize);

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-cost max-flow by successive shortest paths with Dijkstra potentials.
fn solve_component(edges: &[(usize, usize, f64)]) -> Vec<MatchPair> {
    let mut preds: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let mut refs: Vec<usize> = edges.iter().map(|e| e.1).collect();
    preds.sort_unstable();
    preds.dedup();
    refs.sort_unstable();
    refs.dedup();
    let (np, nr) = (preds.len(), refs.len());
    let source = 0;
    let sink = 1 + np + nr;
    let n = sink + 1;
    let mut g: Vec<Vec<Arc>> = vec![Vec::new(); n];
    let add = |g: &mut Vec<Vec<Arc>>, a: usize, b: usize, cost: f64| {
        let (ra, rb) = (g[b].len(), g[a].len());
        g[a].push(Arc {
            to: b,
            rev: ra,
            cap: 1,
            cost,
        });
        g[b].push(Arc {
            to: a,
            rev: rb,
            cap: 0,
            cost: -cost,
        });
    };
    for k in 0..np {
        add(&mut g, source, 1 + k, 0.0);
    }
    for &(i, j, d) in edges {
        let a = 1 + preds.binary_search(&i).unwrap();
        let b = 1 + np + refs.binary_search(&j).unwrap();
        add(&mut g, a, b, d);
    }
    for k in 0..nr {
        add(&mut g, 1 + np + k, sink, 0.0);
    }

    let mut potential = vec![0.0f64; n];
    loop {
        let mut dist = vec![f64::INFINITY; n];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Queued(0.0, source));
        while let Some(Queued(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (k, a) in g[u].iter().enumerate() {
                if a.cap <= 0 {
                    continue;
                }
                let reduced = (a.cost + potential[u] - potential[a.to]).max(0.0);
                let nd = d + reduced;
                if nd < dist[a.to] {
                    dist[a.to] = nd;
                    prev[a.to] = Some((u, k));
                    heap.push(Queued(nd, a.to));
                }
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        for v in 0..n {
            if dist[v].is_finite() {
                potential[v] += dist[v];
            }
        }
        let mut v = sink;
        while let Some((u, k)) = prev[v] {
            let rev = g[u][k].rev;
            g[u][k].cap -= 1;
            g[v][rev].cap += 1;
            v = u;
        }
    }

    let mut out = Vec::new();
    for k in 0..np {
        for a in &g[1 + k] {
            if a.to > np && a.to < sink && a.cap == 0 && a.cost >= 0.0 {
                out.push(MatchPair {
                    pred: preds[k],
                    reference: refs[a.to - 1 - np],
                    distance: a.cost,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counting_accuracy: f64,
    pub objective: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean of two scores, 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// `1 - |N - M| / N` with N predictions and M references, clamped to [0, 1]
/// and 0 when nothing was predicted.
pub fn counting_accuracy(n_pred: usize, n_ref: usize) -> f64 {
    if n_pred == 0 {
        return 0.0;
    }
    let diff = (n_pred as f64 - n_ref as f64).abs();
    (1.0 - diff / n_pred as f64).clamp(0.0, 1.0)
}

pub fn detection_metrics(matching: &Matching, n_pred: usize, n_ref: usize) -> DetectionMetrics {
    let tp = matching.pairs.len().min(n_pred).min(n_ref);
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_ref);
    let f1 = harmonic_mean(precision, recall);
    let ca = counting_accuracy(n_pred, n_ref);
    DetectionMetrics {
        tp,
        fp: n_pred - tp,
        fn_: n_ref - tp,
        precision,
        recall,
        f1,
        counting_accuracy: ca,
        objective: harmonic_mean(f1, ca),
    }
}

/// Matches and scores in one step.
pub fn evaluate_detection(pred: &PointSet, reference: &PointSet, max_dist: f64) -> Result<DetectionMetrics> {
    let m = match_points(pred, reference, max_dist)?;
    Ok(detection_metrics(&m, pred.len(), reference.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pixel-level scores of two binary grids over pixels valid in both.
/// Values above 0.5 count as positive.
pub fn pixel_metrics(pred: &Grid, reference: &Grid) -> Result<PixelMetrics> {
    pred.check_compatible(reference)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &r) in pred.values.iter().zip(&reference.values) {
        if pred.is_nodata(p) || reference.is_nodata(r) {
            continue;
        }
        match (p > 0.5, r > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(PixelMetrics {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
    })
}

/// Binary reference cover: 1 where the CHM reaches `height_threshold`.
pub fn chm_cover(chm: &Grid, height_threshold: f64) -> Grid {
    to_cover(chm, height_threshold)
}

/// Coefficient of determination of `pred` against `reference`.
pub fn r2_score(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::InvalidParam("r2 inputs differ in length".into()));
    }
    if reference.len() < 2 {
        return Err(Error::Insufficient(format!(
            "R² needs at least 2 windows, got {}",
            reference.len()
        )));
    }
    let mean = reference.iter().sum::<f64>() / reference.len() as f64;
    let ss_tot: f64 = reference.iter().map(|r| (r - mean).powi(2)).sum();
    if reference.iter().all(|&r| r == reference[0]) {
        return Err(Error::Insufficient("reference cover fraction has zero variance".into()));
    }
    let ss_res: f64 = pred.iter().zip(reference).map(|(p, r)| (r - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverEvalConfig {
    /// Window side in meters, at least 25.
    pub window: f64,
    pub height_threshold: f64,
    pub min_valid_fraction: f64,
}

impl Default for CoverEvalConfig {
    fn default() -> Self {
        CoverEvalConfig {
            window: MIN_WINDOW_M,
            height_threshold: 3.0,
            min_valid_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverR2 {
    pub r2: f64,
    /// (predicted, reference) cover fraction per kept window, row-major.
    pub windows: Vec<(f64, f64)>,
}

/// Block-wise cover fractions of a binary prediction against a CHM.
///
/// Blocks are `ceil(window / pixel_size)` pixels wide. Border blocks are kept
/// only when both sides still span 25 m. Pixels count when valid in both
/// grids; a prediction pixel is cover when it is at least 0.5.
pub fn cover_fraction_r2(pred_cover: &Grid, ref_chm: &Grid, cfg: &CoverEvalConfig) -> Result<CoverR2> {
    if !(cfg.window >= MIN_WINDOW_M) {
        return Err(Error::InvalidParam(format!(
            "window must be at least {MIN_WINDOW_M} m, got {}",
            cfg.window
        )));
    }
    if !(0.0..=1.0).contains(&cfg.min_valid_fraction) {
        return Err(Error::InvalidParam("min_valid_fraction must lie in [0, 1]".into()));
    }
    pred_cover.check_compatible(ref_chm)?;
    let ps = ref_chm.pixel_size;
    let block = ((cfg.window / ps) - 1e-9).ceil().max(1.0) as usize;
    let min_px = ((MIN_WINDOW_M / ps) - 1e-9).ceil() as usize;
    let (w, h) = (ref_chm.width, ref_chm.height);

    let mut starts = Vec::new();
    for r0 in (0..h).step_by(block) {
        for c0 in (0..w).step_by(block) {
            let bw = block.min(w - c0);
            let bh = block.min(h - r0);
            if bw >= min_px && bh >= min_px {
                starts.push((c0, r0, bw, bh));
            }
        }
    }
    let windows: Vec<Option<(f64, f64)>> = starts
        .par_iter()
        .map(|&(c0, r0, bw, bh)| {
            let (mut valid, mut pc, mut rc) = (0usize, 0usize, 0usize);
            for r in r0..r0 + bh {
                for c in c0..c0 + bw {
                    let i = ref_chm.index(c, r);
                    let (p, v) = (pred_cover.values[i], ref_chm.values[i]);
                    if pred_cover.is_nodata(p) || ref_chm.is_nodata(v) {
                        continue;
                    }
                    valid += 1;
                    pc += (p >= 0.5) as usize;
                    rc += (v >= cfg.height_threshold as f32) as usize;
                }
            }
            let frac = valid as f64 / (bw * bh) as f64;
            (valid > 0 && frac >= cfg.min_valid_fraction).then(|| (pc as f64 / valid as f64, rc as f64 / valid as f64))
        })
        .collect();
    let windows: Vec<(f64, f64)> = windows.into_iter().flatten().collect();
    let (p, r): (Vec<f64>, Vec<f64>) = windows.iter().copied().unzip();
    let r2 = r2_score(&p, &r)?;
    Ok(CoverR2 { r2, windows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    #[default]
    R2,
    F1Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_threshold: f64,
    pub best_score: f64,
    /// (threshold, metric) in input order.
    pub table: Vec<(f64, f64)>,
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::InvalidParam("threshold list is empty".into()));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidParam("thresholds must be sorted ascending".into()));
    }
    Ok(())
}

/// Thresholds the score grid at each value and keeps the best metric;
/// ties go to the lowest threshold.
pub fn sweep_threshold(
    score: &Grid,
    ref_chm: &Grid,
    thresholds: &[f64],
    metric: SweepMetric,
    cfg: &CoverEvalConfig,
) -> Result<SweepResult> {
    check_thresholds(thresholds)?;
    score.check_compatible(ref_chm)?;
    let ref_cover = chm_cover(ref_chm, cfg.height_threshold);
    let mut table = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let cover = to_cover(score, t);
        let value = match metric {
            SweepMetric::R2 => cover_fraction_r2(&cover, ref_chm, cfg)?.r2,
            SweepMetric::F1Pixel => pixel_metrics(&cover, &ref_cover)?.f1,
        };
        table.push((t, value));
    }
    let (best_threshold, best_score) = table
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, (t, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((t, v)),
        })
        .expect("nonempty table");
    Ok(SweepResult {
        best_threshold,
        best_score,
        table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Pixel precision/recall of the thresholded score grid per threshold.
pub fn pr_curve(score: &Grid, ref_chm: &Grid, thresholds: &[f64], height_threshold: f64) -> Result<Vec<PrRow>> {
    check_thresholds(thresholds)?;
    let ref_cover = chm_cover(ref_chm, height_threshold);
    thresholds
        .iter()
        .map(|&t| {
            let m = pixel_metrics(&to_cover(score, t), &ref_cover)?;
            Ok(PrRow {
                threshold: t,
                precision: m.precision,
                recall: m.recall,
            })
        })
        .collect()
}

/// `(10 + 5k) / 100` for k = 0..=16, i.e. 0.10 to 0.90 in steps of 0.05.
pub fn default_thresholds() -> Vec<f64> {
    (0..=16).map(|k| (10 + 5 * k) as f64 / 100.0).collect()
}

pub fn write_sweep_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        threshold: f64,
        metric: f64,
    }
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for &(threshold, metric) in &result.table {
        w.serialize(Row { threshold, metric })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_pr_csv(rows: &[PrRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pretty JSON report.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
