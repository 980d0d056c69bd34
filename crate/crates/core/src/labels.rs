//! Pseudo-label post-processing and dataset bookkeeping.
//!
//! - [`filter_points`] drops detections on building footprints or on low
//!   canopy.
//! - [`gedi_negative_filter`] keeps GEDI footprints that indicate bare ground.
//! - [`split_frames`] builds a spatially disjoint train/test split.
//! - [`choose_strategy`] relates label spacing to canopy height to pick fixed
//!   or height-adaptive detection windows.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peakdetect::{PointSet, WindowMode};
use crate::raster::{Frame, Grid};

/// A GEDI footprint is kept as a negative when sensitivity exceeds this.
pub const GEDI_MIN_SENSITIVITY: f64 = 0.9;
/// ... and RH98 (meters) is below this.
pub const GEDI_MAX_RH98: f64 = 2.5;
/// Minimum height–spacing correlation that selects adaptive windows.
pub const ADAPTIVE_CORRELATION_THRESHOLD: f64 = 0.3;

/// One polygon: an exterior ring followed by optional holes.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub rings: Vec<Vec<(f64, f64)>>,
    bbox: (f64, f64, f64, f64),
}

impl Polygon {
    pub fn new(rings: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        let mut bbox = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for ring in &rings {
            let mut distinct: Vec<(f64, f64)> = Vec::new();
            for &(x, y) in ring {
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::InvalidParam("non-finite polygon vertex".into()));
                }
                if !distinct.contains(&(x, y)) {
                    distinct.push((x, y));
                }
                bbox = (bbox.0.min(x), bbox.1.min(y), bbox.2.max(x), bbox.3.max(y));
            }
            if distinct.len() < 3 {
                return Err(Error::InvalidParam(
                    "polygon ring needs at least 3 distinct vertices".into(),
                ));
            }
        }
        if rings.is_empty() {
            return Err(Error::InvalidParam("polygon without rings".into()));
        }
        Ok(Polygon { rings, bbox })
    }

    /// Even-odd containment over all rings; points on any edge count as
    /// inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.bbox;
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return false;
        }
        let mut inside = false;
        for ring in &self.rings {
            let n = ring.len();
            for i in 0..n {
                let (ax, ay) = ring[i];
                let (bx, by) = ring[(i + 1) % n];
                if on_segment(x, y, ax, ay, bx, by) {
                    return true;
                }
                if (ay > y) != (by > y) {
                    let cross_x = ax + (y - ay) * (bx - ax) / (by - ay);
                    if x < cross_x {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }
}

fn on_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> bool {
    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    cross == 0.0 && px >= ax.min(bx) && px <= ax.max(bx) && py >= ay.min(by) && py <= ay.max(by)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolygonSet {
    pub polygons: Vec<Polygon>,
    pub crs_id: String,
}

impl PolygonSet {
    pub fn with_crs(mut self, crs_id: impl Into<String>) -> Self {
        self.crs_id = crs_id.into();
        self
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.polygons.iter().any(|p| p.contains(x, y))
    }

    /// Parses `Polygon` and `MultiPolygon` geometries from a GeoJSON
    /// `FeatureCollection`, `Feature` or bare geometry. Other geometry types
    /// are skipped.
    pub fn from_geojson(value: &serde_json::Value) -> Result<Self> {
        let mut polygons = Vec::new();
        collect_polygons(value, &mut polygons)?;
        Ok(PolygonSet {
            polygons,
            crs_id: String::new(),
        })
    }

    pub fn read_geojson(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        PolygonSet::from_geojson(&value).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn collect_polygons(value: &serde_json::Value, out: &mut Vec<Polygon>) -> Result<()> {
    let bad = |msg: &str| Error::InvalidParam(format!("geojson: {msg}"));
    match value.get("type").and_then(|t| t.as_str()) {
        Some("FeatureCollection") => {
            let feats = value
                .get("features")
                .and_then(|f| f.as_array())
                .ok_or_else(|| bad("FeatureCollection without features"))?;
            for f in feats {
                collect_polygons(f, out)?;
            }
        }
        Some("Feature") => {
            if let Some(g) = value.get("geometry") {
                if !g.is_null() {
                    collect_polygons(g, out)?;
                }
            }
        }
        Some("Polygon") => {
            let coords = value.get("coordinates").ok_or_else(|| bad("missing coordinates"))?;
            out.push(parse_polygon(coords)?);
        }
        Some("MultiPolygon") => {
            let polys = value
                .get("coordinates")
                .and_then(|c| c.as_array())
                .ok_or_else(|| bad("missing coordinates"))?;
            for p in polys {
                out.push(parse_polygon(p)?);
            }
        }
        Some(_) => {}
        None => return Err(bad("object without a type")),
    }
    Ok(())
}

fn parse_polygon(coords: &serde_json::Value) -> Result<Polygon> {
    let bad = || Error::InvalidParam("geojson: malformed polygon coordinates".into());
    let rings = coords.as_array().ok_or_else(bad)?;
    let mut parsed = Vec::with_capacity(rings.len());
    for ring in rings {
        let verts = ring.as_array().ok_or_else(bad)?;
        let mut r = Vec::with_capacity(verts.len());
        for v in verts {
            let xy = v.as_array().ok_or_else(bad)?;
            let x = xy.first().and_then(|x| x.as_f64()).ok_or_else(bad)?;
            let y = xy.get(1).and_then(|y| y.as_f64()).ok_or_else(bad)?;
            r.push((x, y));
        }
        parsed.push(r);
    }
    Polygon::new(parsed)
}

/// Removes points inside (or on the edge of) any polygon and points whose
/// CHM pixel is missing or lower than `min_height`. Survivors keep their
/// order.
pub fn filter_points(points: &PointSet, chm: &Grid, polygons: &PolygonSet, min_height: f64) -> Result<PointSet> {
    points.check_crs(&chm.crs_id)?;
    if !polygons.polygons.is_empty() {
        points.check_crs(&polygons.crs_id)?;
    }
    let keep: Vec<bool> = points
        .points
        .par_iter()
        .map(|p| {
            let tall = chm.value_at(p.x, p.y).is_some_and(|h| h as f64 >= min_height);
            tall && !polygons.contains(p.x, p.y)
        })
        .collect();
    Ok(PointSet {
        points: points
            .points
            .iter()
            .zip(keep)
            .filter_map(|(p, k)| k.then_some(*p))
            .collect(),
        crs_id: points.crs_id.clone(),
    })
}

/// Pre-extracted GEDI L2A footprint attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GediRecord {
    pub id: String,
    pub num_modes: u32,
    pub sensitivity: f64,
    pub rh98: f64,
    pub lon: f64,
    pub lat: f64,
}

impl GediRecord {
    /// Single ground return, reliable beam, no canopy.
    pub fn is_negative(&self) -> bool {
        self.num_modes == 1 && self.sensitivity > GEDI_MIN_SENSITIVITY && self.rh98 < GEDI_MAX_RH98
    }
}

pub fn gedi_negative_filter(records: &[GediRecord]) -> Vec<GediRecord> {
    records.iter().filter(|r| r.is_negative()).cloned().collect()
}

pub fn read_gedi_csv(path: impl AsRef<Path>) -> Result<Vec<GediRecord>> {
    read_csv_rows(path.as_ref())
}

pub fn write_gedi_csv(records: &[GediRecord], path: impl AsRef<Path>) -> Result<()> {
    write_csv_rows(records, path.as_ref())
}

pub fn read_frames_csv(path: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let path = path.as_ref();
    let frames: Vec<Frame> = read_csv_rows(path)?;
    for f in &frames {
        f.validate().map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(frames)
}

pub fn write_frames_csv(frames: &[Frame], path: impl AsRef<Path>) -> Result<()> {
    write_csv_rows(frames, path.as_ref())
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

fn write_csv_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSplit {
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

/// Seeded spatial train/test split.
///
/// `ceil(fraction * n)` frames are drawn as the initial test set. Frames
/// overlapping a test frame join it until nothing changes, then each test
/// frame is cropped away from every train frame it still overlaps (keeping
/// the largest remaining sub-rectangle); test frames cropped to nothing are
/// dropped.
pub fn split_frames(frames: &[Frame], fraction: f64, seed: u64) -> Result<FrameSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParam(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if frames.is_empty() {
        return Err(Error::Empty("no frames to split".into()));
    }
    for f in frames {
        f.validate()?;
    }
    let n = frames.len();
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; n];
    let mut queue = VecDeque::new();
    let mut initial = rand::seq::index::sample(&mut rng, n, k).into_vec();
    initial.sort_unstable();
    for i in initial {
        in_test[i] = true;
        queue.push_back(i);
    }
    while let Some(t) = queue.pop_front() {
        for j in 0..n {
            if !in_test[j] && frames[j].intersects(&frames[t]) {
                in_test[j] = true;
                queue.push_back(j);
            }
        }
    }

    let train: Vec<Frame> = frames
        .iter()
        .zip(&in_test)
        .filter(|&(_, &t)| !t)
        .map(|(f, _)| f.clone())
        .collect();
    let mut test = Vec::new();
    for (f, _) in frames.iter().zip(&in_test).filter(|(_, &t)| t) {
        let mut cur = Some(f.clone());
        for tr in &train {
            cur = match cur {
                Some(c) if c.intersects(tr) => subtract_largest(&c, tr),
                other => other,
            };
        }
        if let Some(c) = cur {
            test.push(c);
        }
    }
    Ok(FrameSplit { train, test })
}

/// Largest axis-aligned piece of `a` left after removing its overlap with
/// `b`, or `None` when `b` covers `a`.
fn subtract_largest(a: &Frame, b: &Frame) -> Option<Frame> {
    let pieces = [
        (a.min_x, a.min_y, b.min_x.min(a.max_x), a.max_y),
        (b.max_x.max(a.min_x), a.min_y, a.max_x, a.max_y),
        (a.min_x, a.min_y, a.max_x, b.min_y.min(a.max_y)),
        (a.min_x, b.max_y.max(a.min_y), a.max_x, a.max_y),
    ];
    pieces
        .iter()
        .filter(|p| p.0 < p.2 && p.1 < p.3)
        .map(|&(x0, y0, x1, y1)| Frame {
            id: a.id.clone(),
            min_x: x0,
            min_y: y0,
            max_x: x1,
            max_y: y1,
        })
        .fold(None, |best: Option<Frame>, f| match best {
            Some(b) if b.area() >= f.area() => Some(b),
            _ => Some(f),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightSpacing {
    pub height: f64,
    pub nn_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub pairs: Vec<HeightSpacing>,
    pub pearson_r: f64,
    /// Set when either variable has zero variance and r is undefined.
    pub degenerate: bool,
    pub recommendation: WindowMode,
}

/// Correlates each label's nearest-neighbour distance with the CHM height
/// under it. Labels on missing CHM cells are skipped.
pub fn choose_strategy(points: &PointSet, chm: &Grid) -> Result<StrategyReport> {
    points.check_crs(&chm.crs_id)?;
    if points.len() < 3 {
        return Err(Error::Insufficient(format!(
            "strategy analysis needs at least 3 labels, got {}",
            points.len()
        )));
    }
    let pts = &points.points;
    let pairs: Vec<HeightSpacing> = pts
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let h = chm.value_at(p.x, p.y)?;
            let nn = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| p.distance(q))
                .fold(f64::INFINITY, f64::min);
            Some(HeightSpacing {
                height: h as f64,
                nn_distance: nn,
            })
        })
        .collect();
    if pairs.len() < 3 {
        return Err(Error::Insufficient(format!(
            "only {} labels fall on valid CHM cells",
            pairs.len()
        )));
    }
    let hs: Vec<f64> = pairs.iter().map(|p| p.height).collect();
    let ds: Vec<f64> = pairs.iter().map(|p| p.nn_distance).collect();
    let (pearson_r, degenerate) = match pearson(&hs, &ds) {
        Some(r) => (r, false),
        None => (0.0, true),
    };
    let recommendation = if !degenerate && pearson_r >= ADAPTIVE_CORRELATION_THRESHOLD {
        WindowMode::Adaptive
    } else {
        WindowMode::Fixed
    };
    Ok(StrategyReport {
        pairs,
        pearson_r,
        degenerate,
        recommendation,
    })
}

/// Pearson correlation, `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    r.is_finite().then(|| r.clamp(-1.0, 1.0))
}
