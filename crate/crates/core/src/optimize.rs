//! Seeded sequential model-based search over extraction parameters.
//!
//! Each categorical branch (e.g. fixed vs adaptive detection) is searched
//! separately: a scrambled Halton design first, then one Gaussian-process /
//! expected-improvement proposal per trial. Branches take turns, so the
//! history interleaves them; the budget is split evenly.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::chmprep::{preprocess, DengParams, PreprocParams};
use crate::error::{Error, Result};
use crate::evalmetrics::evaluate_detection;
use crate::labels::{filter_points, PolygonSet};
use crate::peakdetect::{detect_peaks, DetectionParams, PointSet, WindowMode};
use crate::raster::Grid;

pub const CANDIDATES: usize = 1024;
pub const OBSERVATION_NOISE: f64 = 1e-6;
const LOCAL_CANDIDATE_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DimKind {
    Continuous {
        lo: f64,
        hi: f64,
    },
    /// Integers in `lo..=hi`; with `odd` only the odd ones.
    Integer {
        lo: i64,
        hi: i64,
        odd: bool,
    },
    Categorical {
        choices: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub kind: DimKind,
    /// Active only when the named categorical takes this choice.
    pub condition: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamValue {
    Float(f64),
    Int(i64),
    Choice(String),
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Choice(v) => f.write_str(v),
        }
    }
}

pub type Assignment = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub dimensions: Vec<Dimension>,
}

impl Dimension {
    pub fn continuous(name: &str, lo: f64, hi: f64) -> Self {
        Dimension {
            name: name.into(),
            kind: DimKind::Continuous { lo, hi },
            condition: None,
        }
    }

    pub fn integer(name: &str, lo: i64, hi: i64, odd: bool) -> Self {
        Dimension {
            name: name.into(),
            kind: DimKind::Integer { lo, hi, odd },
            condition: None,
        }
    }

    pub fn categorical(name: &str, choices: &[&str]) -> Self {
        Dimension {
            name: name.into(),
            kind: DimKind::Categorical {
                choices: choices.iter().map(|c| c.to_string()).collect(),
            },
            condition: None,
        }
    }

    pub fn when(mut self, name: &str, choice: &str) -> Self {
        self.condition = Some((name.into(), choice.into()));
        self
    }

    fn integer_values(&self) -> Vec<i64> {
        match self.kind {
            DimKind::Integer { lo, hi, odd } => (lo..=hi).filter(|v| !odd || v.rem_euclid(2) == 1).collect(),
            _ => Vec::new(),
        }
    }

    /// Unit coordinate to value; integers take the bin `floor(u * m)`.
    fn decode(&self, u: f64) -> ParamValue {
        let u = u.clamp(0.0, 1.0);
        match &self.kind {
            DimKind::Continuous { lo, hi } => ParamValue::Float(lo + u * (hi - lo)),
            DimKind::Integer { .. } => {
                let vals = self.integer_values();
                let k = ((u * vals.len() as f64) as usize).min(vals.len() - 1);
                ParamValue::Int(vals[k])
            }
            DimKind::Categorical { .. } => unreachable!("categoricals are fixed per branch"),
        }
    }

    /// Value to unit coordinate; integers map to bin centers.
    fn encode(&self, v: &ParamValue) -> f64 {
        match (&self.kind, v) {
            (DimKind::Continuous { lo, hi }, ParamValue::Float(x)) => {
                if hi > lo {
                    (x - lo) / (hi - lo)
                } else {
                    0.5
                }
            }
            (DimKind::Integer { .. }, ParamValue::Int(x)) => {
                let vals = self.integer_values();
                let k = vals.iter().position(|v| v == x).unwrap_or(0);
                (k as f64 + 0.5) / vals.len() as f64
            }
            _ => 0.5,
        }
    }

    /// Smallest change of the value that stays in bounds.
    fn nudge(&self, v: &ParamValue, up: bool) -> ParamValue {
        match (&self.kind, v) {
            (DimKind::Continuous { lo, hi }, ParamValue::Float(x)) => {
                let y = if (up && *x < *hi) || *x <= *lo {
                    x.next_up()
                } else {
                    x.next_down()
                };
                ParamValue::Float(y.clamp(*lo, *hi))
            }
            (DimKind::Integer { .. }, ParamValue::Int(x)) => {
                let vals = self.integer_values();
                let k = vals.iter().position(|v| v == x).unwrap_or(0);
                let j = if (up && k + 1 < vals.len()) || k == 0 {
                    (k + 1).min(vals.len() - 1)
                } else {
                    k - 1
                };
                ParamValue::Int(vals[j])
            }
            _ => v.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("dimension {}: {m}", self.name)));
        match &self.kind {
            DimKind::Continuous { lo, hi } if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() => {
                bad("invalid bounds")
            }
            DimKind::Integer { .. } if self.integer_values().is_empty() => bad("no admissible integers"),
            DimKind::Categorical { choices } if choices.is_empty() => bad("no choices"),
            _ => Ok(()),
        }
    }
}

impl ParamSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Self {
        ParamSpace { dimensions }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(Error::InvalidParam("parameter space is empty".into()));
        }
        for d in &self.dimensions {
            d.validate()?;
        }
        Ok(())
    }

    /// Every combination of the unconditional categorical choices.
    pub fn branches(&self) -> Vec<Assignment> {
        let mut out = vec![Assignment::new()];
        for d in &self.dimensions {
            if let (DimKind::Categorical { choices }, None) = (&d.kind, &d.condition) {
                out = out
                    .into_iter()
                    .flat_map(|a| {
                        choices.iter().map(move |c| {
                            let mut a = a.clone();
                            a.insert(d.name.clone(), ParamValue::Choice(c.clone()));
                            a
                        })
                    })
                    .collect();
            }
        }
        out
    }

    /// Non-categorical dimensions active under a branch.
    pub fn active(&self, branch: &Assignment) -> Vec<&Dimension> {
        self.dimensions
            .iter()
            .filter(|d| !matches!(d.kind, DimKind::Categorical { .. }))
            .filter(|d| match &d.condition {
                None => true,
                Some((name, choice)) => {
                    matches!(branch.get(name), Some(ParamValue::Choice(c)) if c == choice)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Assignment,
    pub objective: f64,
    /// Wall-clock seconds spent in the objective.
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub best: Trial,
    pub history: Vec<Trial>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub budget: usize,
    pub n_init: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            budget: 200,
            n_init: 20,
            seed: 0,
        }
    }
}

const PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Halton sequence with one random digit permutation per dimension.
struct ScrambledHalton {
    perms: Vec<Vec<u64>>,
    next: u64,
}

impl ScrambledHalton {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim > PRIMES.len() {
            return Err(Error::InvalidParam(format!(
                "at most {} search dimensions are supported",
                PRIMES.len()
            )));
        }
        let perms = PRIMES[..dim]
            .iter()
            .map(|&b| {
                let mut p: Vec<u64> = (0..b).collect();
                p[1..].shuffle(rng);
                p
            })
            .collect();
        Ok(ScrambledHalton { perms, next: 1 })
    }

    fn sample(&mut self) -> Vec<f64> {
        let i = self.next;
        self.next += 1;
        self.perms
            .iter()
            .zip(PRIMES)
            .map(|(perm, b)| {
                let (mut n, mut f, mut x) = (i, 1.0 / b as f64, 0.0);
                while n > 0 {
                    x += perm[(n % b) as usize] as f64 * f;
                    n /= b;
                    f /= b as f64;
                }
                x
            })
            .collect()
    }
}

/// Standard normal CDF.
fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement over `best` for a Gaussian posterior.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    if sd <= 0.0 {
        return (mean - best).max(0.0);
    }
    let z = (mean - best) / sd;
    (mean - best) * norm_cdf(z) + sd * norm_pdf(z)
}

/// Squared-exponential GP on unit-cube inputs with standardized targets.
struct Gp {
    x: Vec<Vec<f64>>,
    length: f64,
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
    best: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum()
}

impl Gp {
    fn fit(x: &[Vec<f64>], y: &[f64]) -> Self {
        let n = x.len();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let ys: Vec<f64> = y.iter().map(|v| (v - mean) / sd).collect();

        let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in 0..i {
                d.push(sq_dist(&x[i], &x[j]).sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let length = match d.len() {
            0 => 0.5,
            m => {
                let med = if m % 2 == 1 {
                    d[m / 2]
                } else {
                    0.5 * (d[m / 2 - 1] + d[m / 2])
                };
                if med > 0.0 {
                    med
                } else {
                    0.5
                }
            }
        };

        let kernel = DMatrix::from_fn(n, n, |i, j| (-sq_dist(&x[i], &x[j]) / (2.0 * length * length)).exp());
        let mut jitter = OBSERVATION_NOISE;
        let chol = loop {
            let k = &kernel + DMatrix::identity(n, n) * jitter;
            match k.cholesky() {
                Some(c) => break c,
                None if jitter < 1.0 => jitter *= 10.0,
                None => unreachable!("a unit-diagonal kernel plus identity is positive definite"),
            }
        };
        let alpha = chol.solve(&DVector::from_vec(ys.clone()));
        Gp {
            x: x.to_vec(),
            length,
            chol_l: chol.l(),
            alpha,
            best: ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// EI at each candidate.
    fn ei(&self, cands: &[Vec<f64>]) -> Vec<f64> {
        let n = self.x.len();
        let ks = DMatrix::from_fn(n, cands.len(), |i, j| {
            (-sq_dist(&self.x[i], &cands[j]) / (2.0 * self.length * self.length)).exp()
        });
        let mean = ks.transpose() * &self.alpha;
        let v = self
            .chol_l
            .solve_lower_triangular(&ks)
            .expect("cholesky factor has a nonzero diagonal");
        (0..cands.len())
            .map(|j| {
                let var = (1.0 - v.column(j).norm_squared()).max(1e-12);
                expected_improvement(mean[j], var.sqrt(), self.best)
            })
            .collect()
    }
}

struct Branch<'a> {
    fixed: Assignment,
    dims: Vec<&'a Dimension>,
    budget: usize,
    n_init: usize,
    rng: ChaCha8Rng,
    halton: ScrambledHalton,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    seen: Vec<Assignment>,
}

impl Branch<'_> {
    fn assignment(&self, u: &[f64]) -> Assignment {
        let mut a = self.fixed.clone();
        for (d, &ui) in self.dims.iter().zip(u) {
            a.insert(d.name.clone(), d.decode(ui));
        }
        a
    }

    fn propose(&mut self) -> Assignment {
        let u = if self.xs.len() < self.n_init || self.dims.is_empty() {
            self.halton.sample()
        } else {
            self.acquire()
        };
        let mut a = self.assignment(&u);
        // Re-evaluating an identical vector teaches the surrogate nothing.
        let mut tries = 0;
        while !self.dims.is_empty() && self.seen.contains(&a) && tries < 1000 {
            let d = self.dims[self.rng.gen_range(0..self.dims.len())];
            let up = self.rng.gen_bool(0.5);
            let v = d.nudge(&a[&d.name], up);
            a.insert(d.name.clone(), v);
            tries += 1;
        }
        a
    }

    fn acquire(&mut self) -> Vec<f64> {
        let dim = self.dims.len();
        let gp = Gp::fit(&self.xs, &self.ys);
        let incumbent = self
            .ys
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > self.ys[b] { i } else { b });
        let local = Normal::new(0.0, LOCAL_CANDIDATE_SD).expect("positive sd");
        let mut cands = Vec::with_capacity(CANDIDATES);
        for k in 0..CANDIDATES {
            let c: Vec<f64> = if k < CANDIDATES / 2 {
                (0..dim).map(|_| self.rng.gen::<f64>()).collect()
            } else {
                self.xs[incumbent]
                    .iter()
                    .map(|&x| (x + local.sample(&mut self.rng)).clamp(0.0, 1.0))
                    .collect()
            };
            cands.push(c);
        }
        let ei = gp.ei(&cands);
        let best = ei
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > ei[b] { i } else { b });
        cands.swap_remove(best)
    }

    fn record(&mut self, a: &Assignment, y: f64) {
        self.xs.push(self.dims.iter().map(|d| d.encode(&a[&d.name])).collect());
        self.ys.push(y);
        self.seen.push(a.clone());
    }
}

fn share(total: usize, parts: usize, k: usize) -> usize {
    total / parts + usize::from(k < total % parts)
}

/// Maximizes `objective` over `space` with `budget` evaluations, the first
/// `n_init` of them quasi-random. Deterministic for a given seed.
pub fn optimize_params<F>(space: &ParamSpace, mut objective: F, cfg: &OptimizerConfig) -> Result<OptimizeResult>
where
    F: FnMut(&Assignment) -> Result<f64>,
{
    space.validate()?;
    if cfg.n_init < 2 {
        return Err(Error::InvalidParam("n_init must be at least 2".into()));
    }
    if cfg.budget < cfg.n_init {
        return Err(Error::InvalidParam(format!(
            "budget {} is smaller than n_init {}",
            cfg.budget, cfg.n_init
        )));
    }
    let fixed = space.branches();
    if cfg.n_init < fixed.len() {
        return Err(Error::InvalidParam(format!(
            "n_init {} cannot cover {} categorical branches",
            cfg.n_init,
            fixed.len()
        )));
    }
    let nb = fixed.len();
    let mut branches = Vec::with_capacity(nb);
    for (k, f) in fixed.into_iter().enumerate() {
        let dims = space.active(&f);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let halton = ScrambledHalton::new(dims.len(), &mut rng)?;
        branches.push(Branch {
            fixed: f,
            dims,
            budget: share(cfg.budget, nb, k),
            n_init: share(cfg.n_init, nb, k),
            rng,
            halton,
            xs: Vec::new(),
            ys: Vec::new(),
            seen: Vec::new(),
        });
    }

    let mut history: Vec<Trial> = Vec::with_capacity(cfg.budget);
    while history.len() < cfg.budget {
        for b in branches.iter_mut() {
            if b.xs.len() >= b.budget {
                continue;
            }
            let a = b.propose();
            let start = Instant::now();
            let y = objective(&a)?;
            if !y.is_finite() {
                return Err(Error::InvalidParam(format!("objective returned {y}")));
            }
            let elapsed = start.elapsed().as_secs_f64();
            b.record(&a, y);
            log::debug!("trial {} objective {y}", history.len());
            history.push(Trial {
                index: history.len(),
                params: a,
                objective: y,
                elapsed,
            });
        }
    }
    let best = history
        .iter()
        .fold(&history[0], |b, t| if t.objective > b.objective { t } else { b })
        .clone();
    Ok(OptimizeResult { best, history })
}

/// Running maximum of the history objectives.
pub fn best_so_far(history: &[Trial]) -> Vec<f64> {
    history
        .iter()
        .scan(f64::NEG_INFINITY, |m, t| {
            *m = m.max(t.objective);
            Some(*m)
        })
        .collect()
}

/// History as `index,objective,<param columns>`; inactive parameters are
/// left empty.
pub fn write_history_csv(space: &ParamSpace, history: &[Trial], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let names: Vec<&str> = space.dimensions.iter().map(|d| d.name.as_str()).collect();
    writeln!(out, "index,objective,{}", names.join(",")).expect("write to memory");
    for t in history {
        let cols: Vec<String> = names
            .iter()
            .map(|n| t.params.get(*n).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        writeln!(out, "{},{},{}", t.index, t.objective, cols.join(",")).expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Preprocessing plus detection: everything `extract` needs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractionParams {
    #[serde(default)]
    pub preprocess: PreprocParams,
    #[serde(default)]
    pub detection: DetectionParams,
}

/// The full search space: 10 preprocessing dimensions plus 2 (fixed) or 4
/// (adaptive) detection dimensions. Kernel size 1 leaves a filter off.
pub fn canonical_space() -> ParamSpace {
    ParamSpace::new(vec![
        Dimension::integer("avg_kernel", 1, 7, true),
        Dimension::integer("median_kernel", 1, 7, true),
        Dimension::integer("gauss_kernel", 1, 7, true),
        Dimension::continuous("gauss_sigma", 0.5, 3.0),
        Dimension::integer("deng_kernel", 3, 7, true),
        Dimension::integer("deng_steps", 1, 3, false),
        Dimension::continuous("deng_high", 2.0, 20.0),
        Dimension::continuous("deng_low", 1.0, 20.0),
        Dimension::integer("deng_blur_kernel", 1, 7, true),
        Dimension::continuous("deng_blur_sigma", 0.5, 3.0),
        Dimension::categorical("mode", &["fixed", "adaptive"]),
        Dimension::continuous("threshold", 0.5, 10.0),
        Dimension::continuous("window", 1.0, 20.0).when("mode", "fixed"),
        Dimension::continuous("window_min", 1.0, 20.0).when("mode", "adaptive"),
        Dimension::continuous("window_max", 1.0, 20.0).when("mode", "adaptive"),
        Dimension::continuous("height_factor", 0.05, 1.5).when("mode", "adaptive"),
    ])
}

impl ExtractionParams {
    /// Builds parameters from a canonical-space assignment. Missing entries
    /// keep their defaults; a low pit threshold above the high one is
    /// clamped and reversed window bounds are swapped.
    pub fn from_assignment(a: &Assignment) -> Result<Self> {
        let f = |name: &str, default: f64| match a.get(name) {
            Some(ParamValue::Float(v)) => *v,
            Some(ParamValue::Int(v)) => *v as f64,
            _ => default,
        };
        let k = |name: &str, default: usize| match a.get(name) {
            Some(ParamValue::Int(v)) => *v as usize,
            _ => default,
        };
        let mode = match a.get("mode") {
            Some(ParamValue::Choice(c)) if c == "adaptive" => WindowMode::Adaptive,
            Some(ParamValue::Choice(c)) if c == "fixed" => WindowMode::Fixed,
            None => WindowMode::Fixed,
            Some(other) => return Err(Error::InvalidParam(format!("unknown mode {other}"))),
        };
        let dd = DetectionParams::default();
        let high = f("deng_high", 10.0);
        let (wmin, wmax) = (f("window_min", dd.window_min), f("window_max", dd.window_max));
        let p = ExtractionParams {
            preprocess: PreprocParams {
                avg_kernel: k("avg_kernel", 1),
                median_kernel: k("median_kernel", 1),
                gauss_kernel: k("gauss_kernel", 1),
                gauss_sigma: f("gauss_sigma", 1.0),
                deng: Some(DengParams {
                    kernel: k("deng_kernel", 3),
                    steps: k("deng_steps", 1),
                    high_threshold: high,
                    low_threshold: f("deng_low", 5.0).min(high),
                    blur_kernel: k("deng_blur_kernel", 1),
                    blur_sigma: f("deng_blur_sigma", 1.0),
                }),
            },
            detection: DetectionParams {
                mode,
                threshold: f("threshold", dd.threshold),
                window: f("window", dd.window),
                window_min: wmin.min(wmax),
                window_max: wmin.max(wmax),
                height_factor: f("height_factor", dd.height_factor),
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.detection.validate()
    }
}

/// Preprocess, detect, post-filter on the preprocessed CHM.
pub fn extract(chm: &Grid, polygons: &PolygonSet, min_height: f64, params: &ExtractionParams) -> Result<PointSet> {
    let pre = preprocess(chm, &params.preprocess)?;
    extract_preprocessed(&pre, polygons, min_height, &params.detection)
}

fn extract_preprocessed(pre: &Grid, polygons: &PolygonSet, min_height: f64, det: &DetectionParams) -> Result<PointSet> {
    let pts = detect_peaks(pre, det)?;
    filter_points(&pts, pre, polygons, min_height)
}

/// Harmonic mean of F1 and counting accuracy of extracted points against
/// calibration labels.
pub fn extraction_objective(
    chm: &Grid,
    labels: &PointSet,
    polygons: &PolygonSet,
    min_height: f64,
    max_dist: f64,
    params: &ExtractionParams,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("calibration labels".into()));
    }
    let pts = extract(chm, polygons, min_height, params)?;
    Ok(evaluate_detection(&pts, labels, max_dist)?.objective)
}

/// [`extraction_objective`] with a small cache of preprocessed grids, for
/// trials that share preprocessing settings.
pub struct ExtractionObjective<'a> {
    pub chm: &'a Grid,
    pub labels: &'a PointSet,
    pub polygons: &'a PolygonSet,
    pub min_height: f64,
    pub max_dist: f64,
    cache: HashMap<String, Grid>,
    order: VecDeque<String>,
    capacity: usize,
}

impl<'a> ExtractionObjective<'a> {
    pub fn new(
        chm: &'a Grid,
        labels: &'a PointSet,
        polygons: &'a PolygonSet,
        min_height: f64,
        max_dist: f64,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("calibration labels".into()));
        }
        labels.check_crs(&chm.crs_id)?;
        Ok(ExtractionObjective {
            chm,
            labels,
            polygons,
            min_height,
            max_dist,
            cache: HashMap::new(),
            order: VecDeque::new(),
            capacity: 8,
        })
    }

    pub fn evaluate(&mut self, params: &ExtractionParams) -> Result<f64> {
        params.validate()?;
        let key = format!("{:?}", params.preprocess);
        if !self.cache.contains_key(&key) {
            let pre = preprocess(self.chm, &params.preprocess)?;
            if self.order.len() == self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.cache.remove(&old);
                }
            }
            self.order.push_back(key.clone());
            self.cache.insert(key.clone(), pre);
        }
        let pre = &self.cache[&key];
        let pts = extract_preprocessed(pre, self.polygons, self.min_height, &params.detection)?;
        Ok(evaluate_detection(&pts, self.labels, self.max_dist)?.objective)
    }

    pub fn evaluate_assignment(&mut self, a: &Assignment) -> Result<f64> {
        self.evaluate(&ExtractionParams::from_assignment(a)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d() -> ParamSpace {
        ParamSpace::new(vec![Dimension::continuous("x", 0.0, 1.0)])
    }

    fn x_of(a: &Assignment) -> f64 {
        match a["x"] {
            ParamValue::Float(v) => v,
            _ => unreachable!(),
        }
    }

    fn quad(a: &Assignment) -> Result<f64> {
        Ok(1.0 - (x_of(a) - 0.3).powi(2))
    }

    #[test]
    fn canonical_dimension_counts() {
        let s = canonical_space();
        let counts: Vec<usize> = s.branches().iter().map(|b| s.active(b).len()).collect();
        assert_eq!(counts, vec![12, 14]);
    }

    #[test]
    fn finds_quadratic_peak() {
        let mut ok = 0;
        for seed in 0..10 {
            let cfg = OptimizerConfig {
                budget: 40,
                n_init: 10,
                seed,
            };
            let r = optimize_params(&one_d(), quad, &cfg).unwrap();
            if (x_of(&r.best.params) - 0.3).abs() <= 0.05 {
                ok += 1;
            }
        }
        assert!(ok >= 9, "{ok}/10 seeds converged");
    }

    #[test]
    fn random_search_mode() {
        let cfg = OptimizerConfig {
            budget: 10,
            n_init: 10,
            seed: 5,
        };
        let r = optimize_params(&one_d(), quad, &cfg).unwrap();
        let max = r.history.iter().map(|t| t.objective).fold(f64::MIN, f64::max);
        assert_eq!(r.best.objective, max);
        assert_eq!(r.history.len(), 10);
    }

    #[test]
    fn seeded_history_is_reproducible() {
        let cfg = OptimizerConfig {
            budget: 30,
            n_init: 6,
            seed: 11,
        };
        let strip = |r: OptimizeResult| {
            r.history
                .into_iter()
                .map(|t| (t.params, t.objective.to_bits()))
                .collect::<Vec<_>>()
        };
        let a = strip(optimize_params(&one_d(), quad, &cfg).unwrap());
        let b = strip(optimize_params(&one_d(), quad, &cfg).unwrap());
        assert_eq!(a, b);
        let c = strip(optimize_params(&one_d(), quad, &OptimizerConfig { seed: 12, ..cfg }).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_budgets() {
        let cfg = OptimizerConfig {
            budget: 5,
            n_init: 10,
            seed: 0,
        };
        assert!(optimize_params(&one_d(), quad, &cfg).is_err());
        let cfg = OptimizerConfig {
            budget: 5,
            n_init: 1,
            seed: 0,
        };
        assert!(optimize_params(&one_d(), quad, &cfg).is_err());
        assert!(optimize_params(&ParamSpace::default(), quad, &OptimizerConfig::default()).is_err());
    }

    #[test]
    fn proposals_respect_space_and_are_unique() {
        let space = ParamSpace::new(vec![
            Dimension::integer("k", 1, 7, true),
            Dimension::integer("n", 0, 2, false),
            Dimension::categorical("m", &["a", "b"]),
            Dimension::continuous("only_b", -1.0, 1.0).when("m", "b"),
        ]);
        let cfg = OptimizerConfig {
            budget: 24,
            n_init: 4,
            seed: 3,
        };
        let r = optimize_params(&space, |_| Ok(0.5), &cfg).unwrap();
        let mut seen = Vec::new();
        for t in &r.history {
            let ParamValue::Int(k) = t.params["k"] else { panic!() };
            assert!((1..=7).contains(&k) && k % 2 == 1);
            let ParamValue::Choice(m) = &t.params["m"] else {
                panic!()
            };
            assert_eq!(t.params.contains_key("only_b"), m == "b");
            if let Some(ParamValue::Float(v)) = t.params.get("only_b") {
                assert!((-1.0..=1.0).contains(v));
            }
            if m == "b" {
                assert!(!seen.contains(&t.params));
            }
            seen.push(t.params.clone());
        }
        // With 4 odd kernels x 3 counts = 12 combinations, branch "a" holds
        // 12 trials and they are all distinct.
        let a: Vec<_> = r
            .history
            .iter()
            .filter(|t| t.params["m"] == ParamValue::Choice("a".into()))
            .collect();
        for i in 0..a.len() {
            for j in 0..i {
                assert_ne!(a[i].params, a[j].params);
            }
        }
        assert!(best_so_far(&r.history).windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ties_go_to_first_trial() {
        let cfg = OptimizerConfig {
            budget: 8,
            n_init: 4,
            seed: 0,
        };
        let r = optimize_params(&one_d(), |_| Ok(1.0), &cfg).unwrap();
        assert_eq!(r.best.index, 0);
    }

    #[test]
    fn halton_fills_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut h = ScrambledHalton::new(3, &mut rng).unwrap();
        let pts: Vec<Vec<f64>> = (0..64).map(|_| h.sample()).collect();
        for d in 0..3 {
            let mut v: Vec<f64> = pts.iter().map(|p| p[d]).collect();
            assert!(v.iter().all(|x| (0.0..1.0).contains(x)));
            v.sort_by(f64::total_cmp);
            v.dedup();
            assert_eq!(v.len(), 64);
            // every quarter of the axis gets a fair share
            for q in 0..4 {
                let n = v.iter().filter(|x| (**x * 4.0) as usize == q).count();
                assert!((12..=20).contains(&n), "dim {d} quarter {q}: {n}");
            }
        }
    }

    #[test]
    fn ei_basics() {
        assert_eq!(expected_improvement(1.0, 0.0, 0.5), 0.5);
        assert!(expected_improvement(0.0, 1.0, 0.0) > 0.39);
        assert!(expected_improvement(0.0, 1.0, 1.0) < expected_improvement(0.0, 1.0, 0.0));
    }

    #[test]
    fn assignment_mapping() {
        let mut a = Assignment::new();
        a.insert("mode".into(), ParamValue::Choice("adaptive".into()));
        a.insert("window_min".into(), ParamValue::Float(9.0));
        a.insert("window_max".into(), ParamValue::Float(4.0));
        a.insert("deng_high".into(), ParamValue::Float(4.0));
        a.insert("deng_low".into(), ParamValue::Float(8.0));
        let p = ExtractionParams::from_assignment(&a).unwrap();
        assert_eq!(p.detection.mode, WindowMode::Adaptive);
        assert_eq!((p.detection.window_min, p.detection.window_max), (4.0, 9.0));
        let d = p.preprocess.deng.unwrap();
        assert_eq!((d.high_threshold, d.low_threshold), (4.0, 4.0));
    }

    #[test]
    fn history_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let space = canonical_space();
        let mut a = Assignment::new();
        a.insert("mode".into(), ParamValue::Choice("fixed".into()));
        a.insert("window".into(), ParamValue::Float(2.5));
        let t = Trial {
            index: 0,
            params: a,
            objective: 0.5,
            elapsed: 1.0,
        };
        write_history_csv(&space, &[t], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("index,objective,avg_kernel,"));
        assert_eq!(lines.next().unwrap(), "0,0.5,,,,,,,,,,,fixed,,2.5,,,");
    }
}
