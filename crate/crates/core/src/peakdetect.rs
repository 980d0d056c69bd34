//! Local-maximum detection by greedy non-maximum suppression.
//!
//! Every valid pixel at or above the threshold is a candidate. Candidates are
//! visited by descending value (ties by ascending row-major index) and a
//! candidate is accepted when no already accepted point lies within its
//! suppression radius. The radius is half a window size in meters, either
//! fixed or scaled with the candidate's own value.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    #[default]
    Fixed,
    Adaptive,
}

/// Detection settings. Window sizes are full widths in meters; only the
/// fields of the active mode are read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionParams {
    pub mode: WindowMode,
    pub threshold: f64,
    pub window: f64,
    pub window_min: f64,
    pub window_max: f64,
    /// Meters of window per unit of grid value.
    pub height_factor: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            mode: WindowMode::Fixed,
            threshold: 3.0,
            window: 5.0,
            window_min: 2.0,
            window_max: 10.0,
            height_factor: 0.3,
        }
    }
}

impl DetectionParams {
    pub fn fixed(window: f64, threshold: f64) -> Self {
        DetectionParams {
            mode: WindowMode::Fixed,
            threshold,
            window,
            ..Default::default()
        }
    }

    pub fn adaptive(window_min: f64, window_max: f64, height_factor: f64, threshold: f64) -> Self {
        DetectionParams {
            mode: WindowMode::Adaptive,
            threshold,
            window_min,
            window_max,
            height_factor,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() {
            return Err(Error::InvalidParam("detection threshold must be finite".into()));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParam(format!("{name} must be positive, got {v}")))
            }
        };
        match self.mode {
            WindowMode::Fixed => positive("window", self.window),
            WindowMode::Adaptive => {
                positive("window_min", self.window_min)?;
                positive("window_max", self.window_max)?;
                positive("height_factor", self.height_factor)?;
                if self.window_min > self.window_max {
                    return Err(Error::InvalidParam(format!(
                        "window_min {} exceeds window_max {}",
                        self.window_min, self.window_max
                    )));
                }
                Ok(())
            }
        }
    }

    fn max_radius(&self) -> f64 {
        match self.mode {
            WindowMode::Fixed => self.window / 2.0,
            WindowMode::Adaptive => self.window_max / 2.0,
        }
    }
}

/// Suppression radius in meters for a candidate with the given value.
pub fn window_radius(value: f64, params: &DetectionParams) -> f64 {
    match params.mode {
        WindowMode::Fixed => params.window / 2.0,
        WindowMode::Adaptive => (params.height_factor * value).clamp(params.window_min, params.window_max) / 2.0,
    }
}

/// A tree center in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreePoint {
    pub x: f64,
    pub y: f64,
    /// Grid value at detection (height or confidence); NaN when unknown.
    pub value: f64,
}

impl TreePoint {
    pub fn new(x: f64, y: f64, value: f64) -> Self {
        TreePoint { x, y, value }
    }

    pub fn distance(&self, other: &TreePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<TreePoint>,
    pub crs_id: String,
}

#[derive(Debug, Deserialize)]
struct CsvPoint {
    x: f64,
    y: f64,
    value: Option<f64>,
}

impl PointSet {
    pub fn new(points: Vec<TreePoint>) -> Self {
        PointSet {
            points,
            crs_id: String::new(),
        }
    }

    pub fn with_crs(mut self, crs_id: impl Into<String>) -> Self {
        self.crs_id = crs_id.into();
        self
    }

    pub fn from_xy(xy: &[(f64, f64)]) -> Self {
        PointSet::new(xy.iter().map(|&(x, y)| TreePoint::new(x, y, f64::NAN)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_crs(&self, crs_id: &str) -> Result<()> {
        if self.crs_id != crs_id {
            return Err(Error::CrsMismatch(self.crs_id.clone(), crs_id.to_string()));
        }
        Ok(())
    }

    /// Reads a CSV with `x,y` columns and an optional `value` column.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::format(path, e.to_string()),
            _ => Error::Csv(e),
        })?;
        let mut points = Vec::new();
        for rec in rdr.deserialize::<CsvPoint>() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            if !rec.x.is_finite() || !rec.y.is_finite() {
                return Err(Error::format(path, "non-finite point coordinate"));
            }
            points.push(TreePoint::new(rec.x, rec.y, rec.value.unwrap_or(f64::NAN)));
        }
        Ok(PointSet::new(points))
    }

    /// Writes `x,y,value` rows in point order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["x", "y", "value"])?;
        for p in &self.points {
            wtr.write_record([p.x.to_string(), p.y.to_string(), p.value.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    /// GeoJSON `FeatureCollection` of points with a `value` property.
    pub fn to_geojson(&self) -> serde_json::Value {
        let features: Vec<_> = self
            .points
            .iter()
            .map(|p| {
                serde_json::json!({
                    "type": "Feature",
                    "geometry": { "type": "Point", "coordinates": [p.x, p.y] },
                    "properties": {
                        "value": if p.value.is_finite() { serde_json::json!(p.value) } else { serde_json::Value::Null }
                    },
                })
            })
            .collect();
        serde_json::json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn write_geojson(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_geojson())?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Detects local maxima on `grid`; see the module docs for the exact rule.
/// Points come out in acceptance order (descending value).
pub fn detect_peaks(grid: &Grid, params: &DetectionParams) -> Result<PointSet> {
    params.validate()?;
    if grid.is_empty() {
        return Err(Error::Empty("cannot detect peaks on an empty grid".into()));
    }
    let mut candidates: Vec<(f32, usize)> = grid
        .values
        .par_iter()
        .enumerate()
        .filter(|(_, &v)| !grid.is_nodata(v) && v as f64 >= params.threshold)
        .map(|(i, &v)| (v, i))
        .collect();
    candidates.par_sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let ps = grid.pixel_size;
    // Bucket side in pixels, at least the largest suppression radius.
    let cell = ((params.max_radius() / ps).ceil() as usize).max(1);
    let bw = grid.width.div_ceil(cell);
    let bh = grid.height.div_ceil(cell);
    let mut buckets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); bw * bh];

    let mut points = Vec::new();
    for &(v, idx) in &candidates {
        let (col, row) = (idx % grid.width, idx / grid.width);
        let radius = window_radius(v as f64, params);
        let r2 = radius * radius;
        let (bc, br) = (col / cell, row / cell);
        let reach = ((radius / ps).ceil() as usize).div_ceil(cell).max(1);
        let mut suppressed = false;
        'search: for nr in br.saturating_sub(reach)..=(br + reach).min(bh - 1) {
            for nc in bc.saturating_sub(reach)..=(bc + reach).min(bw - 1) {
                for &(ac, ar) in &buckets[nr * bw + nc] {
                    let dx = (ac as f64 - col as f64) * ps;
                    let dy = (ar as f64 - row as f64) * ps;
                    if dx * dx + dy * dy <= r2 {
                        suppressed = true;
                        break 'search;
                    }
                }
            }
        }
        if !suppressed {
            buckets[br * bw + bc].push((col, row));
            let (x, y) = grid.pixel_center(col, row);
            points.push(TreePoint::new(x, y, v as f64));
        }
    }
    Ok(PointSet {
        points,
        crs_id: grid.crs_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bump_grid(w: usize, h: usize, ps: f64, peaks: &[(usize, usize, f32)]) -> Grid {
        let mut v = vec![0.0f32; w * h];
        for r in 0..h {
            for c in 0..w {
                for &(pc, pr, amp) in peaks {
                    let d2 = ((c as f64 - pc as f64).powi(2) + (r as f64 - pr as f64).powi(2)) * ps * ps;
                    let g = amp * (-d2 / (2.0 * 2.0 * 2.0)).exp() as f32;
                    v[r * w + c] = v[r * w + c].max(g);
                }
            }
        }
        Grid::new(w, h, 0.0, h as f64 * ps, ps, v).unwrap()
    }

    /// Replays the greedy rule by brute force over every pair.
    fn brute_nms(grid: &Grid, params: &DetectionParams) -> Vec<(f64, f64)> {
        let mut cands: Vec<(f32, usize)> = grid
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_nan() && **v as f64 >= params.threshold)
            .map(|(i, v)| (*v, i))
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut acc: Vec<(f64, f64)> = Vec::new();
        for (v, i) in cands {
            let (x, y) = grid.pixel_center(i % grid.width, i / grid.width);
            let r = window_radius(v as f64, params);
            if acc.iter().all(|&(ax, ay)| (ax - x).hypot(ay - y) > r) {
                acc.push((x, y));
            }
        }
        acc
    }

    #[test]
    fn single_bump() {
        let g = bump_grid(21, 21, 1.0, &[(10, 7, 10.0)]);
        let pts = detect_peaks(&g, &DetectionParams::fixed(9.0, 2.0)).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!((pts.points[0].x, pts.points[0].y), g.pixel_center(10, 7));
        assert_eq!(pts.points[0].value, 10.0);
    }

    #[test]
    fn two_bumps_thirty_meters_apart() {
        let g = bump_grid(50, 20, 1.0, &[(10, 10, 8.0), (40, 10, 9.0)]);
        let pts = detect_peaks(&g, &DetectionParams::fixed(9.0, 1.0)).unwrap();
        assert_eq!(pts.len(), 2);
        // descending value order
        assert_eq!(pts.points[0].x, 40.5);
        assert_eq!(pts.points[1].x, 10.5);
    }

    #[test]
    fn radius_rules() {
        let fixed = DetectionParams::fixed(10.0, 0.0);
        assert_eq!(window_radius(123.0, &fixed), 5.0);
        let ad = DetectionParams::adaptive(2.0, 12.0, 0.5, 0.0);
        assert_eq!(window_radius(0.0, &ad), 1.0);
        assert_eq!(window_radius(1000.0, &ad), 6.0);
        let ad = DetectionParams::adaptive(2.0, 8.0, 0.5, 0.0);
        assert_eq!(window_radius(20.0, &ad), 4.0);
    }

    #[test]
    fn adaptive_uniform_plateau_spacing() {
        // Uniform 20 m: radius clamp(10, 2, 8) / 2 = 4 m on every candidate.
        let g = Grid::filled(30, 30, 0.0, 30.0, 1.0, 20.0).unwrap();
        let params = DetectionParams::adaptive(2.0, 8.0, 0.5, 3.0);
        let pts = detect_peaks(&g, &params).unwrap();
        for (i, a) in pts.points.iter().enumerate() {
            for b in &pts.points[i + 1..] {
                assert!(a.distance(b) > 4.0);
            }
        }
        let expected = brute_nms(&g, &params);
        let got: Vec<_> = pts.points.iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(got, expected);
        // First accepted is the lowest index on the tie.
        assert_eq!(got[0], g.pixel_center(0, 0));
    }

    #[test]
    fn invalid_inputs() {
        let g = Grid::filled(3, 3, 0.0, 3.0, 1.0, 1.0).unwrap();
        assert!(detect_peaks(&g, &DetectionParams::fixed(0.0, 0.0)).is_err());
        assert!(detect_peaks(&g, &DetectionParams::fixed(1.0, f64::NAN)).is_err());
        assert!(detect_peaks(&g, &DetectionParams::adaptive(5.0, 2.0, 1.0, 0.0)).is_err());
        let empty = Grid::new(0, 0, 0.0, 0.0, 1.0, vec![]).unwrap();
        assert!(matches!(
            detect_peaks(&empty, &DetectionParams::fixed(1.0, 0.0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        let set = PointSet::new(vec![TreePoint::new(1.5, -2.25, 7.0), TreePoint::new(0.1, 0.2, 0.3)]);
        set.write_csv(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().next(), Some("x,y,value"));
        assert_eq!(PointSet::read_csv(&p).unwrap(), set);
        fs::write(&p, "x,y\n1,2\n").unwrap();
        let back = PointSet::read_csv(&p).unwrap();
        assert_eq!((back.points[0].x, back.points[0].y), (1.0, 2.0));
        assert!(back.points[0].value.is_nan());
    }

    #[test]
    fn geojson_shape() {
        let set = PointSet::new(vec![TreePoint::new(1.0, 2.0, 3.0)]);
        let gj = set.to_geojson();
        assert_eq!(gj["features"][0]["geometry"]["coordinates"][1], 2.0);
        assert_eq!(gj["features"][0]["properties"]["value"], 3.0);
    }

    fn distinct_grid() -> impl Strategy<Value = Grid> {
        (3usize..12, 3usize..12, 0u64..1000).prop_map(|(w, h, seed)| {
            // A permutation of distinct values keeps candidate order unique.
            let n = w * h;
            let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.5).collect();
            let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                vals.swap(i, j);
            }
            Grid::new(w, h, 0.0, h as f64, 1.0, vals).unwrap()
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force_replay(g in distinct_grid(), t in 0.0f64..20.0, adaptive in any::<bool>(), w in 0.5f64..6.0) {
            let params = if adaptive {
                DetectionParams::adaptive(w.min(2.0), w.max(2.0), 0.2, t)
            } else {
                DetectionParams::fixed(w, t)
            };
            let got: Vec<_> = detect_peaks(&g, &params).unwrap().points.iter().map(|p| (p.x, p.y)).collect();
            prop_assert_eq!(got, brute_nms(&g, &params));
        }

        #[test]
        fn values_at_least_threshold(g in distinct_grid(), t in 0.0f64..40.0) {
            let pts = detect_peaks(&g, &DetectionParams::fixed(3.0, t)).unwrap();
            prop_assert!(pts.points.iter().all(|p| p.value >= t));
        }

        #[test]
        fn raising_threshold_never_adds_points(g in distinct_grid(), t1 in 0.0f64..20.0, dt in 0.0f64..20.0) {
            let params = DetectionParams::adaptive(1.0, 4.0, 0.1, t1);
            let low: Vec<_> = detect_peaks(&g, &params).unwrap().points.iter().map(|p| (p.x, p.y)).collect();
            let high = detect_peaks(&g, &DetectionParams { threshold: t1 + dt, ..params }).unwrap();
            for p in &high.points {
                prop_assert!(low.contains(&(p.x, p.y)));
            }
        }

        #[test]
        fn isolated_bumps_all_found(k in 1usize..5, seed in 0usize..100) {
            let peaks: Vec<_> = (0..k).map(|i| (8 + 20 * i, 8 + (seed + i * 7) % 10, 5.0 + i as f32)).collect();
            let g = bump_grid(20 * k + 16, 26, 1.0, &peaks);
            let pts = detect_peaks(&g, &DetectionParams::fixed(12.0, 1.0)).unwrap();
            prop_assert_eq!(pts.len(), k);
        }
    }
}
