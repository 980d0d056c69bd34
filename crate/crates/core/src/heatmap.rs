//! Gaussian heatmap targets with uncertainty-scaled kernels.
//!
//! Every tree center draws an amplitude-1 Gaussian whose standard deviation
//! is `sigma_m * (1 + max(0, s))`, with `s` read from the uncertainty grid at
//! the center's pixel. Kernels are combined with a pixel-wise maximum. The
//! training loss is the mean squared error against that target plus `delta`
//! times the mean square of the uncertainty map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peakdetect::{detect_peaks, DetectionParams, PointSet};
use crate::raster::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    /// Minimal kernel standard deviation in meters.
    pub sigma_m: f64,
    /// Weight of the uncertainty regularizer.
    pub delta: f64,
    /// Kernels are evaluated within this many effective sigmas; infinity
    /// disables truncation.
    pub truncation_multiple: f64,
    pub pixel_size: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            sigma_m: 4.0,
            delta: 0.2,
            truncation_multiple: 3.0,
            pixel_size: 3.0,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_m > 0.0) || !self.sigma_m.is_finite() {
            return Err(Error::InvalidParam(format!(
                "sigma_m must be positive, got {}",
                self.sigma_m
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "delta must be non-negative, got {}",
                self.delta
            )));
        }
        if !(self.truncation_multiple >= 3.0) {
            return Err(Error::InvalidParam(format!(
                "truncation_multiple must be at least 3, got {}",
                self.truncation_multiple
            )));
        }
        if !(self.pixel_size > 0.0) {
            return Err(Error::InvalidParam("pixel_size must be positive".into()));
        }
        Ok(())
    }

    /// The same configuration with kernel truncation turned off.
    pub fn untruncated(self) -> Self {
        HeatmapConfig {
            truncation_multiple: f64::INFINITY,
            ..self
        }
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        self.validate()?;
        if grid.pixel_size != self.pixel_size {
            return Err(Error::GeometryMismatch(format!(
                "heatmap pixel size {} but grid has {}",
                self.pixel_size, grid.pixel_size
            )));
        }
        Ok(())
    }
}

/// Effective kernel standard deviation for uncertainty `s`.
#[inline]
pub fn effective_sigma(sigma_m: f64, s: f64) -> f64 {
    sigma_m * (1.0 + s.max(0.0))
}

#[derive(Debug, Clone)]
struct Kernel {
    cx: f64,
    cy: f64,
    sigma: f64,
    reach2: f64,
    cols: (usize, usize),
    rows: (usize, usize),
    /// Pixel holding the center, when it is inside the grid.
    center_pixel: Option<usize>,
    /// Whether the uncertainty at the center is positive (gradient flows).
    active: bool,
}

impl Kernel {
    #[inline]
    fn eval(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let d2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        (d2 <= self.reach2).then(|| ((-d2 / (2.0 * self.sigma * self.sigma)).exp(), d2))
    }
}

fn build_kernels(points: &PointSet, geom: &Grid, cfg: &HeatmapConfig) -> Vec<Kernel> {
    let ps = geom.pixel_size;
    let span = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        // Pixel i has its center at (i + 0.5) in pixel units.
        let a = (lo - 0.5).ceil().max(0.0);
        let b = (hi - 0.5).floor().min(n as f64 - 1.0);
        (n > 0 && a <= b).then_some((a as usize, b as usize))
    };
    points
        .points
        .iter()
        .filter_map(|p| {
            let center_pixel = geom.pixel_at(p.x, p.y).map(|(c, r)| geom.index(c, r));
            let s = center_pixel
                .map(|i| geom.values[i])
                .filter(|v| !geom.is_nodata(*v))
                .map_or(0.0, |v| v as f64);
            let sigma = effective_sigma(cfg.sigma_m, s);
            let reach = cfg.truncation_multiple * sigma;
            let fx = (p.x - geom.origin_x) / ps;
            let fy = (geom.origin_y - p.y) / ps;
            let r = reach / ps;
            let cols = span(fx - r, fx + r, geom.width)?;
            let rows = span(fy - r, fy + r, geom.height)?;
            Some(Kernel {
                cx: p.x,
                cy: p.y,
                sigma,
                reach2: reach * reach,
                cols,
                rows,
                center_pixel,
                active: s > 0.0,
            })
        })
        .collect()
}

/// Kernel ids touching each row, in kernel order.
fn row_buckets(kernels: &[Kernel], height: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); height];
    for (k, ker) in kernels.iter().enumerate() {
        for r in ker.rows.0..=ker.rows.1 {
            rows[r].push(k);
        }
    }
    rows
}

/// Winning kernel at a pixel: index, value and squared distance.
type Winner = Option<(usize, f64, f64)>;

/// Target value and winning kernel per pixel; ties go to the lower kernel.
fn target_with_argmax(kernels: &[Kernel], geom: &Grid) -> (Vec<f64>, Vec<Winner>) {
    let buckets = row_buckets(kernels, geom.height);
    let per_row: Vec<(Vec<f64>, Vec<Winner>)> = (0..geom.height)
        .into_par_iter()
        .map(|r| {
            let mut y = vec![0.0f64; geom.width];
            let mut arg = vec![None; geom.width];
            for &k in &buckets[r] {
                let ker = &kernels[k];
                for c in ker.cols.0..=ker.cols.1 {
                    let (x, wy) = geom.pixel_center(c, r);
                    if let Some((g, d2)) = ker.eval(x, wy) {
                        if arg[c].is_none() || g > y[c] {
                            y[c] = g;
                            arg[c] = Some((k, g, d2));
                        }
                    }
                }
            }
            (y, arg)
        })
        .collect();
    let mut y = Vec::with_capacity(geom.len());
    let mut arg = Vec::with_capacity(geom.len());
    for (yr, ar) in per_row {
        y.extend(yr);
        arg.extend(ar);
    }
    (y, arg)
}

/// Renders the max-pooled Gaussian target on the geometry of `uncertainty`.
pub fn render_targets(points: &PointSet, uncertainty: &Grid, config: &HeatmapConfig) -> Result<Grid> {
    config.check_grid(uncertainty)?;
    points.check_crs(&uncertainty.crs_id)?;
    let kernels = build_kernels(points, uncertainty, config);
    let buckets = row_buckets(&kernels, uncertainty.height);
    let mut out = Grid {
        nodata: f32::NAN,
        ..uncertainty.clone()
    };
    out.values = crate::raster::par_rows(uncertainty.width, uncertainty.height, |r, buf| {
        for &k in &buckets[r] {
            let ker = &kernels[k];
            for (c, v) in buf.iter_mut().enumerate().take(ker.cols.1 + 1).skip(ker.cols.0) {
                let (x, y) = uncertainty.pixel_center(c, r);
                if let Some((g, _)) = ker.eval(x, y) {
                    *v = v.max(g as f32);
                }
            }
        }
    });
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_h: Grid,
    pub grad_s: Grid,
}

/// Loss of prediction `h` and uncertainty `s` against the target drawn from
/// `points`, with gradients for both maps.
///
/// Only pixels valid in both maps count; `N` is their number. The gradient
/// with respect to `s` has the regularizer term everywhere and, at each
/// center pixel with positive uncertainty, the chain term through the
/// kernels that win the max-pool.
pub fn loss(h: &Grid, points: &PointSet, s: &Grid, config: &HeatmapConfig) -> Result<LossOutput> {
    h.check_compatible(s)?;
    config.check_grid(s)?;
    points.check_crs(&s.crs_id)?;
    let kernels = build_kernels(points, s, config);
    let (y, arg) = target_with_argmax(&kernels, s);

    let valid: Vec<bool> = h
        .values
        .iter()
        .zip(&s.values)
        .map(|(&hv, &sv)| !h.is_nodata(hv) && !s.is_nodata(sv))
        .collect();
    let n = valid.iter().filter(|v| **v).count();
    let zeros = || s.like(vec![0.0; s.len()]);
    if n == 0 {
        return Ok(LossOutput {
            value: 0.0,
            grad_h: zeros(),
            grad_s: zeros(),
        });
    }
    let inv_n = 1.0 / n as f64;
    let w = s.width;

    // Per-row partial sums and chain contributions, reduced in row order.
    type RowSums = (f64, f64, Vec<(usize, f64)>);
    let rows: Vec<RowSums> = (0..s.height)
        .into_par_iter()
        .map(|r| {
            let mut se = 0.0;
            let mut ss = 0.0;
            let mut chain = Vec::new();
            for c in 0..w {
                let i = r * w + c;
                if !valid[i] {
                    continue;
                }
                let diff = h.values[i] as f64 - y[i];
                let sv = s.values[i] as f64;
                se += diff * diff;
                ss += sv * sv;
                if let Some((k, g, d2)) = arg[i] {
                    let ker = &kernels[k];
                    if ker.active && ker.center_pixel.is_some() {
                        let dg_dsigma = g * d2 / ker.sigma.powi(3);
                        chain.push((k, -2.0 * inv_n * diff * dg_dsigma * config.sigma_m));
                    }
                }
            }
            (se, ss, chain)
        })
        .collect();

    let mut sum_se = 0.0;
    let mut sum_ss = 0.0;
    let mut per_kernel = vec![0.0f64; kernels.len()];
    for (se, ss, chain) in &rows {
        sum_se += se;
        sum_ss += ss;
        for &(k, v) in chain {
            per_kernel[k] += v;
        }
    }
    let value = sum_se * inv_n + config.delta * sum_ss * inv_n;

    let grad_h: Vec<f32> = (0..h.len())
        .map(|i| {
            if valid[i] {
                (2.0 * inv_n * (h.values[i] as f64 - y[i])) as f32
            } else {
                0.0
            }
        })
        .collect();
    let mut grad_s: Vec<f64> = (0..s.len())
        .map(|i| {
            if valid[i] {
                2.0 * config.delta * inv_n * s.values[i] as f64
            } else {
                0.0
            }
        })
        .collect();
    for (k, ker) in kernels.iter().enumerate() {
        if let Some(p) = ker.center_pixel {
            if valid[p] {
                grad_s[p] += per_kernel[k];
            }
        }
    }
    Ok(LossOutput {
        value,
        grad_h: s.like(grad_h),
        grad_s: s.like(grad_s.into_iter().map(|v| v as f32).collect()),
    })
}

/// Loss value and gradients in `f64`, for checks that need more precision
/// than the `f32` grids carry.
pub fn loss_f64(h: &Grid, points: &PointSet, s: &Grid, config: &HeatmapConfig) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let out = loss(h, points, s, config)?;
    Ok((
        out.value,
        out.grad_h.values.iter().map(|&v| v as f64).collect(),
        out.grad_s.values.iter().map(|&v| v as f64).collect(),
    ))
}

/// Binary cover: 1 where the heatmap reaches `threshold`, else 0. The
/// comparison runs at grid precision (`f32`).
pub fn to_cover(heatmap: &Grid, threshold: f64) -> Grid {
    let threshold = threshold as f32;
    let values = heatmap
        .values
        .iter()
        .map(|&v| {
            if heatmap.is_nodata(v) {
                heatmap.nodata
            } else if v >= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    heatmap.like(values)
}

/// Tree positions from a heatmap: fixed-window peak detection where
/// `min_distance` is the full suppression window.
pub fn to_points(heatmap: &Grid, threshold: f64, min_distance: f64) -> Result<PointSet> {
    if !(min_distance > 0.0) {
        return Err(Error::InvalidParam(format!(
            "min_distance must be positive, got {min_distance}"
        )));
    }
    detect_peaks(heatmap, &DetectionParams::fixed(min_distance, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peakdetect::TreePoint;
    use proptest::prelude::*;

    fn zero_grid(w: usize, h: usize, ps: f64) -> Grid {
        Grid::filled(w, h, 0.0, h as f64 * ps, ps, 0.0).unwrap()
    }

    fn cfg(sigma: f64, ps: f64) -> HeatmapConfig {
        HeatmapConfig {
            sigma_m: sigma,
            pixel_size: ps,
            ..Default::default()
        }
    }

    #[test]
    fn defaults() {
        let c = HeatmapConfig::default();
        assert_eq!((c.sigma_m, c.delta, c.truncation_multiple), (4.0, 0.2, 3.0));
    }

    #[test]
    fn single_kernel_values() {
        let s = zero_grid(21, 21, 1.0);
        let (cx, cy) = s.pixel_center(10, 10);
        let pts = PointSet::new(vec![TreePoint::new(cx, cy, 1.0)]);
        let y = render_targets(&pts, &s, &cfg(4.0, 1.0)).unwrap();
        assert_eq!(y.get(10, 10), 1.0);
        assert!((y.get(14, 10) as f64 - (-0.5f64).exp()).abs() < 1e-7);
        assert!((y.get(10, 6) as f64 - 0.6065306597).abs() < 1e-7);
        assert!(y.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_and_duplicate_points() {
        let s = zero_grid(12, 9, 3.0);
        let none = render_targets(&PointSet::default(), &s, &cfg(4.0, 3.0)).unwrap();
        assert!(none.values.iter().all(|&v| v == 0.0));
        let p = TreePoint::new(10.0, 14.0, 0.0);
        let one = render_targets(&PointSet::new(vec![p]), &s, &cfg(4.0, 3.0)).unwrap();
        let two = render_targets(&PointSet::new(vec![p, p]), &s, &cfg(4.0, 3.0)).unwrap();
        assert!(one.bits_eq(&two));
    }

    #[test]
    fn uncertainty_widens_kernel() {
        let mut s = zero_grid(21, 21, 1.0);
        let (cx, cy) = s.pixel_center(10, 10);
        let pts = PointSet::new(vec![TreePoint::new(cx, cy, 1.0)]);
        let base = render_targets(&pts, &s, &cfg(2.0, 1.0)).unwrap();
        let i = s.index(10, 10);
        s.values[i] = 1.0;
        let wide = render_targets(&pts, &s, &cfg(2.0, 1.0)).unwrap();
        // sigma_eff = 4 now
        assert!((wide.get(14, 10) as f64 - (-0.5f64).exp()).abs() < 1e-7);
        for (a, b) in base.values.iter().zip(&wide.values) {
            assert!(b >= a);
        }
        // negative uncertainty keeps the minimal sigma
        s.values[i] = -3.0;
        let neg = render_targets(&pts, &s, &cfg(2.0, 1.0)).unwrap();
        assert!(neg.bits_eq(&base));
    }

    #[test]
    fn truncation_limits_support() {
        let s = zero_grid(40, 1, 1.0);
        let pts = PointSet::new(vec![TreePoint::new(0.5, 0.5, 0.0)]);
        let y = render_targets(&pts, &s, &cfg(2.0, 1.0)).unwrap();
        assert!(y.get(6, 0) > 0.0);
        assert_eq!(y.get(7, 0), 0.0);
        let y = render_targets(&pts, &s, &cfg(2.0, 1.0).untruncated()).unwrap();
        assert!(y.get(7, 0) > 0.0);
    }

    #[test]
    fn pixel_size_must_match() {
        let s = zero_grid(4, 4, 1.0);
        assert!(matches!(
            render_targets(&PointSet::default(), &s, &cfg(4.0, 3.0)),
            Err(Error::GeometryMismatch(_))
        ));
        assert!(render_targets(&PointSet::default(), &s, &cfg(0.0, 1.0)).is_err());
    }

    #[test]
    fn loss_zero_cases() {
        let s = zero_grid(16, 16, 1.0);
        let pts = PointSet::new(vec![TreePoint::new(8.0, 8.0, 0.0)]);
        let y = render_targets(&pts, &s, &cfg(2.0, 1.0)).unwrap();
        // f32 rendering of y is within rounding of the f64 target.
        let out = loss(&y, &pts, &s, &cfg(2.0, 1.0)).unwrap();
        assert!(out.value < 1e-14);
        assert!(out.grad_h.values.iter().all(|v| v.abs() < 1e-7));
        assert!(out.grad_s.values.iter().all(|v| v.abs() < 1e-7));

        let out = loss(&s, &PointSet::default(), &s, &cfg(2.0, 1.0)).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn loss_regularizer_is_mean_square() {
        let h = zero_grid(4, 4, 1.0);
        let s = h.like(vec![0.5; 16]);
        let c = HeatmapConfig {
            delta: 0.2,
            ..cfg(1.0, 1.0)
        };
        let out = loss(&h, &PointSet::default(), &s, &c).unwrap();
        assert!((out.value - 0.2 * 0.25).abs() < 1e-12);
        assert!((out.grad_s.values[0] as f64 - 2.0 * 0.2 * 0.5 / 16.0).abs() < 1e-9);
    }

    #[test]
    fn loss_geometry_mismatch() {
        let h = zero_grid(4, 4, 1.0);
        let s = zero_grid(5, 4, 1.0);
        assert!(matches!(
            loss(&h, &PointSet::default(), &s, &cfg(1.0, 1.0)),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn cover_threshold_inverts_kernel() {
        // sigma_eff 4 m at 3 m pixels: exp(-1/2) keeps pixels within 4 m.
        let s = zero_grid(15, 15, 3.0);
        let (cx, cy) = s.pixel_center(7, 7);
        let pts = PointSet::new(vec![TreePoint::new(cx, cy, 0.0)]);
        let y = render_targets(&pts, &s, &cfg(4.0, 3.0)).unwrap();
        let cover = to_cover(&y, (-0.5f64).exp());
        for r in 0..15 {
            for c in 0..15 {
                let (x, yy) = s.pixel_center(c, r);
                let inside = (x - cx).hypot(yy - cy) <= 4.0;
                assert_eq!(cover.get(c, r) == 1.0, inside, "pixel ({c},{r})");
            }
        }
        assert!(to_cover(&y, 0.0).values.iter().all(|&v| v == 1.0));
        assert!(to_cover(&y, 1.5).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cover_keeps_nodata() {
        let g = zero_grid(2, 1, 1.0).like(vec![f32::NAN, 0.7]);
        let c = to_cover(&g, 0.5);
        assert!(c.values[0].is_nan());
        assert_eq!(c.values[1], 1.0);
    }

    #[test]
    fn decode_points() {
        let s = zero_grid(40, 20, 1.0);
        let a = s.pixel_center(5, 10);
        let b = s.pixel_center(35, 10);
        let pts = PointSet::new(vec![TreePoint::new(a.0, a.1, 0.0), TreePoint::new(b.0, b.1, 0.0)]);
        let y = render_targets(&pts, &s, &cfg(2.0, 1.0)).unwrap();
        let dec = to_points(&y, 0.5, 10.0).unwrap();
        assert_eq!(dec.len(), 2);
        let one = render_targets(&PointSet::new(vec![pts.points[0]]), &s, &cfg(2.0, 1.0)).unwrap();
        let dec = to_points(&one, 0.1, 10.0).unwrap();
        assert_eq!(dec.len(), 1);
        assert_eq!((dec.points[0].x, dec.points[0].y), a);
        assert!(to_points(&y, 1.1, 10.0).unwrap().is_empty());
        assert!(to_points(&y, 0.5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn center_pixel_quantization_bound(x in 0.0f64..30.0, y in 0.0f64..30.0, ps in prop_oneof![Just(1.0), Just(3.0)]) {
            let n = (30.0 / ps) as usize;
            let s = Grid::filled(n, n, 0.0, 30.0, ps, 0.0).unwrap();
            let c = cfg(4.0, ps);
            let pts = PointSet::new(vec![TreePoint::new(x, y, 0.0)]);
            let out = render_targets(&pts, &s, &c).unwrap();
            let v = out.value_at(x, y).unwrap() as f64;
            let half_diag = ps * std::f64::consts::SQRT_2 / 2.0;
            prop_assert!(v >= (-(half_diag * half_diag) / (2.0 * 16.0)).exp() - 1e-6);
        }

        #[test]
        fn kernel_grows_with_sigma(d in 0.0f64..50.0, s1 in 0.1f64..10.0, ds in 0.0f64..10.0) {
            let g = |s: f64| (-(d * d) / (2.0 * s * s)).exp();
            prop_assert!(g(s1 + ds) >= g(s1));
        }
    }
}
