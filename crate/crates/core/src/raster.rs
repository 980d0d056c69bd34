//! Georeferenced single-band rasters.
//!
//! A [`Grid`] is a north-up, square-pixel raster of `f32` values. Missing
//! cells hold the grid's `nodata` sentinel (NaN unless a file says
//! otherwise); [`Grid::is_nodata`] treats any NaN as missing as well.
//!
//! Two on-disk formats are supported:
//!
//! - ESRI ASCII grids (`.asc`), for interchange.
//! - A raw format (`.rawgrid`): the magic bytes `RGRD`, a version byte `1`,
//!   then row-major little-endian `f32` values. Geometry lives in a JSON
//!   sidecar next to the payload (`<file>.rawgrid.json`) with the keys
//!   `width`, `height`, `origin_x`, `origin_y`, `pixel_size`, `nodata`
//!   (a number, or `null` for NaN) and `crs_id`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"RGRD";
const RAW_VERSION: u8 = 1;
const ASC_DEFAULT_NODATA: f32 = -9999.0;

/// Georeferenced raster of 32-bit values.
#[derive(Debug, Clone)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    /// World x of the left edge of column 0.
    pub origin_x: f64,
    /// World y of the top edge of row 0.
    pub origin_y: f64,
    pub pixel_size: f64,
    /// Row-major values, `width * height` long.
    pub values: Vec<f32>,
    pub nodata: f32,
    pub crs_id: String,
}

impl Grid {
    /// Builds a grid with NaN nodata and an empty CRS identifier.
    pub fn new(
        width: usize,
        height: usize,
        origin_x: f64,
        origin_y: f64,
        pixel_size: f64,
        values: Vec<f32>,
    ) -> Result<Self> {
        if !(pixel_size > 0.0) || !pixel_size.is_finite() {
            return Err(Error::InvalidParam(format!(
                "pixel_size must be positive, got {pixel_size}"
            )));
        }
        if !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(Error::InvalidParam("grid origin must be finite".into()));
        }
        if values.len() != width * height {
            return Err(Error::GeometryMismatch(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        let mut grid = Grid {
            width,
            height,
            origin_x,
            origin_y,
            pixel_size,
            values,
            nodata: f32::NAN,
            crs_id: String::new(),
        };
        grid.normalize_nodata();
        Ok(grid)
    }

    pub fn filled(
        width: usize,
        height: usize,
        origin_x: f64,
        origin_y: f64,
        pixel_size: f64,
        value: f32,
    ) -> Result<Self> {
        Grid::new(
            width,
            height,
            origin_x,
            origin_y,
            pixel_size,
            vec![value; width * height],
        )
    }

    /// Replaces the sentinel; cells that were missing under the old sentinel
    /// become the new one.
    pub fn with_nodata(mut self, nodata: f32) -> Self {
        let old = self.nodata;
        for v in &mut self.values {
            if v.is_nan() || *v == old {
                *v = nodata;
            }
        }
        self.nodata = nodata;
        self.normalize_nodata();
        self
    }

    pub fn with_crs(mut self, crs_id: impl Into<String>) -> Self {
        self.crs_id = crs_id.into();
        self
    }

    /// A grid with this grid's geometry, sentinel and CRS but new values.
    pub fn like(&self, values: Vec<f32>) -> Grid {
        assert_eq!(values.len(), self.len(), "value count must match geometry");
        let mut grid = Grid {
            values,
            ..self.empty_clone()
        };
        grid.normalize_nodata();
        grid
    }

    fn empty_clone(&self) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            pixel_size: self.pixel_size,
            values: Vec::new(),
            nodata: self.nodata,
            crs_id: self.crs_id.clone(),
        }
    }

    /// Rewrites every missing cell (NaN or equal to the sentinel) with the
    /// exact sentinel bit pattern.
    pub fn normalize_nodata(&mut self) {
        let nodata = self.nodata;
        let nan_sentinel = nodata.is_nan();
        for v in &mut self.values {
            if v.is_nan() || (!nan_sentinel && *v == nodata) {
                *v = if nan_sentinel { f32::NAN } else { nodata };
            }
        }
        if nan_sentinel {
            self.nodata = f32::NAN;
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn is_nodata(&self, v: f32) -> bool {
        v.is_nan() || v == self.nodata
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.values[self.index(col, row)]
    }

    /// The value at `(col, row)`, or `None` when the cell is missing.
    #[inline]
    pub fn valid(&self, col: usize, row: usize) -> Option<f32> {
        let v = self.get(col, row);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !self.is_nodata(**v)).count()
    }

    /// World coordinates of the center of pixel `(col, row)`.
    #[inline]
    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// The pixel containing world point `(x, y)`.
    ///
    /// Pixels are closed on their upper-left side inside the grid, so a
    /// point on a shared edge belongs to the pixel with the lower index.
    pub fn pixel_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = containing_index((x - self.origin_x) / self.pixel_size, self.width)?;
        let row = containing_index((self.origin_y - y) / self.pixel_size, self.height)?;
        Some((col, row))
    }

    /// Valid value of the pixel containing `(x, y)`.
    pub fn value_at(&self, x: f64, y: f64) -> Option<f32> {
        let (c, r) = self.pixel_at(x, y)?;
        self.valid(c, r)
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
            && self.pixel_size == other.pixel_size
    }

    /// Errors unless `other` shares this grid's geometry and CRS.
    pub fn check_compatible(&self, other: &Grid) -> Result<()> {
        if self.crs_id != other.crs_id {
            return Err(Error::CrsMismatch(self.crs_id.clone(), other.crs_id.clone()));
        }
        if !self.same_geometry(other) {
            return Err(Error::GeometryMismatch(format!(
                "{}x{} @ ({}, {}) / {} vs {}x{} @ ({}, {}) / {}",
                self.width,
                self.height,
                self.origin_x,
                self.origin_y,
                self.pixel_size,
                other.width,
                other.height,
                other.origin_x,
                other.origin_y,
                other.pixel_size
            )));
        }
        Ok(())
    }

    /// Bitwise equality of geometry, sentinel, CRS and every value.
    pub fn bits_eq(&self, other: &Grid) -> bool {
        self.same_geometry(other)
            && self.crs_id == other.crs_id
            && self.nodata.to_bits() == other.nodata.to_bits()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// World extent as `(min_x, min_y, max_x, max_y)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin_x,
            self.origin_y - self.height as f64 * self.pixel_size,
            self.origin_x + self.width as f64 * self.pixel_size,
            self.origin_y,
        )
    }

    /// Finite min and max over valid cells.
    pub fn value_range(&self) -> Option<(f32, f32)> {
        self.values
            .iter()
            .filter(|v| !self.is_nodata(**v))
            .fold(None, |acc, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }
}

fn containing_index(t: f64, n: usize) -> Option<usize> {
    if !(t >= 0.0) || t > n as f64 || n == 0 {
        return None;
    }
    let idx = if t <= 0.0 { 0 } else { t.ceil() as usize - 1 };
    Some(idx.min(n - 1))
}

/// Fills a `width * height` buffer row by row in parallel.
pub(crate) fn par_rows<F>(width: usize, height: usize, fill: F) -> Vec<f32>
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let mut out = vec![0.0f32; width * height];
    if width == 0 {
        return out;
    }
    out.par_chunks_mut(width)
        .enumerate()
        .for_each(|(row, buf)| fill(row, buf));
    out
}

/// Axis-aligned world rectangle of one acquisition unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: String,
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Frame {
    pub fn new(id: impl Into<String>, min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let frame = Frame {
            id: id.into(),
            min_x,
            min_y,
            max_x,
            max_y,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_x < self.max_x && self.min_y < self.max_y) {
            return Err(Error::InvalidParam(format!("frame `{}` has an empty extent", self.id)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x) * (self.max_y - self.min_y)
    }

    /// Area of the intersection with `other`; zero when they only touch.
    pub fn overlap_area(&self, other: &Frame) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    pub fn intersects(&self, other: &Frame) -> bool {
        self.overlap_area(other) > 0.0
    }
}

/// On-disk raster encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridFormat {
    Asc,
    Raw,
}

impl GridFormat {
    /// Picks the format from the extension: `.asc` or `.rawgrid`.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("asc") => Ok(GridFormat::Asc),
            Some(e) if e.eq_ignore_ascii_case("rawgrid") => Ok(GridFormat::Raw),
            _ => Err(Error::format(
                path,
                "unknown raster extension (expected .asc or .rawgrid)",
            )),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSidecar {
    width: usize,
    height: usize,
    origin_x: f64,
    origin_y: f64,
    pixel_size: f64,
    nodata: Option<f32>,
    crs_id: String,
}

/// Path of the JSON sidecar belonging to a raw payload.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    match GridFormat::from_path(path)? {
        GridFormat::Asc => read_asc(path),
        GridFormat::Raw => read_raw(path),
    }
}

pub fn write_grid(grid: &Grid, path: impl AsRef<Path>, format: GridFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        GridFormat::Asc => write_asc(grid, path),
        GridFormat::Raw => write_raw(grid, path),
    }
}

fn read_raw(path: &Path) -> Result<Grid> {
    let side = sidecar_path(path);
    let meta_text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: RawSidecar = serde_json::from_str(&meta_text).map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 5 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::format(path, "missing RGRD magic"));
    }
    if bytes[4] != RAW_VERSION {
        return Err(Error::format(path, format!("unsupported raw version {}", bytes[4])));
    }
    let payload = &bytes[5..];
    let n = meta.width * meta.height;
    if payload.len() != n * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} bytes, {}x{} needs {}",
                payload.len(),
                meta.width,
                meta.height,
                n * 4
            ),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let grid = Grid::new(
        meta.width,
        meta.height,
        meta.origin_x,
        meta.origin_y,
        meta.pixel_size,
        values,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(grid.with_nodata(meta.nodata.unwrap_or(f32::NAN)).with_crs(meta.crs_id))
}

fn write_raw(grid: &Grid, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(5 + grid.values.len() * 4);
    bytes.extend_from_slice(RAW_MAGIC);
    bytes.push(RAW_VERSION);
    for v in &grid.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = RawSidecar {
        width: grid.width,
        height: grid.height,
        origin_x: grid.origin_x,
        origin_y: grid.origin_y,
        pixel_size: grid.pixel_size,
        nodata: (!grid.nodata.is_nan()).then_some(grid.nodata),
        crs_id: grid.crs_id.clone(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

fn read_asc(path: &Path) -> Result<Grid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = text.split_whitespace().peekable();

    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut center_x = false;
    let mut center_y = false;
    let mut cellsize = None;
    let mut nodata = None;

    while let Some(tok) = tokens.peek() {
        if tok.parse::<f64>().is_ok() {
            break;
        }
        let key = tokens.next().unwrap().to_ascii_lowercase();
        let value = tokens
            .next()
            .ok_or_else(|| Error::format(path, format!("header key `{key}` has no value")))?;
        let num: f64 = value
            .parse()
            .map_err(|_| Error::format(path, format!("bad value `{value}` for `{key}`")))?;
        match key.as_str() {
            "ncols" => ncols = Some(num),
            "nrows" => nrows = Some(num),
            "xllcorner" => xll = Some(num),
            "yllcorner" => yll = Some(num),
            "xllcenter" => {
                xll = Some(num);
                center_x = true;
            }
            "yllcenter" => {
                yll = Some(num);
                center_y = true;
            }
            "cellsize" => cellsize = Some(num),
            "nodata_value" => nodata = Some(num),
            _ => return Err(Error::format(path, format!("unknown header key `{key}`"))),
        }
    }

    let require =
        |v: Option<f64>, name: &str| v.ok_or_else(|| Error::format(path, format!("missing header key `{name}`")));
    let ncols = require(ncols, "ncols")?;
    let nrows = require(nrows, "nrows")?;
    let cellsize = require(cellsize, "cellsize")?;
    let mut xll = require(xll, "xllcorner")?;
    let mut yll = require(yll, "yllcorner")?;
    if ncols < 0.0 || nrows < 0.0 || ncols.fract() != 0.0 || nrows.fract() != 0.0 {
        return Err(Error::format(path, "ncols/nrows must be non-negative integers"));
    }
    let (width, height) = (ncols as usize, nrows as usize);
    if center_x {
        xll -= cellsize / 2.0;
    }
    if center_y {
        yll -= cellsize / 2.0;
    }

    let mut values = Vec::with_capacity(width * height);
    for tok in tokens {
        let v: f32 = tok
            .parse()
            .map_err(|_| Error::format(path, format!("bad cell value `{tok}`")))?;
        values.push(v);
    }
    if values.len() != width * height {
        return Err(Error::format(
            path,
            format!("{} cell values for a {width}x{height} grid", values.len()),
        ));
    }
    let origin_y = yll + height as f64 * cellsize;
    let grid =
        Grid::new(width, height, xll, origin_y, cellsize, values).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(match nodata {
        Some(nd) => {
            // Keep NaN cells missing under the file's sentinel.
            let nd = nd as f32;
            let mut g = grid;
            g.nodata = nd;
            g.normalize_nodata();
            g
        }
        None => grid,
    })
}

fn write_asc(grid: &Grid, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let nodata = if grid.nodata.is_nan() {
        ASC_DEFAULT_NODATA
    } else {
        grid.nodata
    };
    let (_, min_y, _, _) = grid.extent();
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(w, "ncols {}", grid.width)?;
        writeln!(w, "nrows {}", grid.height)?;
        writeln!(w, "xllcorner {}", grid.origin_x)?;
        writeln!(w, "yllcorner {}", min_y)?;
        writeln!(w, "cellsize {}", grid.pixel_size)?;
        writeln!(w, "NODATA_value {}", nodata)?;
        for row in grid.values.chunks(grid.width.max(1)) {
            let mut first = true;
            for &v in row {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                // Display prints the shortest string that parses back to v.
                if grid.is_nodata(v) {
                    write!(w, "{nodata}")?;
                } else {
                    write!(w, "{v}")?;
                }
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour resampling to a new pixel size over the same extent.
///
/// The output keeps the input origin and covers as many whole target pixels
/// as fit in the input extent. Each output pixel copies the input pixel that
/// contains its center.
pub fn resample_nearest(grid: &Grid, target_pixel_size: f64) -> Result<Grid> {
    if !(target_pixel_size > 0.0) || !target_pixel_size.is_finite() {
        return Err(Error::InvalidParam(format!(
            "target pixel size must be positive, got {target_pixel_size}"
        )));
    }
    let ratio = grid.pixel_size / target_pixel_size;
    let width = (grid.width as f64 * ratio + 1e-9).floor() as usize;
    let height = (grid.height as f64 * ratio + 1e-9).floor() as usize;
    if width == 0 || height == 0 {
        return Err(Error::InvalidParam(format!(
            "resampling a {}x{} grid from {} to {} leaves no pixels",
            grid.width, grid.height, grid.pixel_size, target_pixel_size
        )));
    }
    let mut out = Grid {
        width,
        height,
        origin_x: grid.origin_x,
        origin_y: grid.origin_y,
        pixel_size: target_pixel_size,
        values: Vec::new(),
        nodata: grid.nodata,
        crs_id: grid.crs_id.clone(),
    };
    let cols: Vec<usize> = (0..width)
        .map(|c| {
            let (x, _) = out.pixel_center(c, 0);
            containing_index((x - grid.origin_x) / grid.pixel_size, grid.width).unwrap_or(grid.width - 1)
        })
        .collect();
    let rows: Vec<usize> = (0..height)
        .map(|r| {
            let (_, y) = out.pixel_center(0, r);
            containing_index((grid.origin_y - y) / grid.pixel_size, grid.height).unwrap_or(grid.height - 1)
        })
        .collect();
    out.values = par_rows(width, height, |r, buf| {
        let src = rows[r] * grid.width;
        for (c, v) in buf.iter_mut().enumerate() {
            *v = grid.values[src + cols[c]];
        }
    });
    Ok(out)
}

/// Pixel-wise median over a stack of co-registered grids.
///
/// Missing cells are ignored; an even number of valid values yields the mean
/// of the two middle ones, and a pixel with no valid value stays missing.
pub fn median_stack(grids: &[Grid]) -> Result<Grid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Empty("median_stack needs at least one grid".into()))?;
    for g in &grids[1..] {
        first.check_compatible(g)?;
    }
    let values = par_rows(first.width, first.height, |row, buf| {
        let mut stack = Vec::with_capacity(grids.len());
        for (col, out) in buf.iter_mut().enumerate() {
            stack.clear();
            let idx = first.index(col, row);
            stack.extend(
                grids
                    .iter()
                    .map(|g| g.values[idx])
                    .filter(|&v| !(v.is_nan() || v == first.nodata)),
            );
            *out = if stack.is_empty() {
                first.nodata
            } else {
                stack.sort_by(f32::total_cmp);
                median_sorted(&stack)
            };
        }
    });
    Ok(first.like(values))
}

/// Median of an ascending slice; even lengths average the middle pair.
pub(crate) fn median_sorted(sorted: &[f32]) -> f32 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        ((sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize, ps: f64, values: Vec<f32>) -> Grid {
        Grid::new(w, h, 100.0, 200.0, ps, values).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Grid::new(2, 2, 0.0, 0.0, 1.0, vec![0.0; 3]).is_err());
        assert!(Grid::new(2, 2, 0.0, 0.0, 0.0, vec![0.0; 4]).is_err());
        assert!(Grid::new(2, 2, 0.0, 0.0, -1.0, vec![0.0; 4]).is_err());
    }

    #[test]
    fn pixel_center_round_trips() {
        let g = Grid::filled(7, 5, -3.25, 11.5, 0.5, 1.0).unwrap();
        for r in 0..5 {
            for c in 0..7 {
                let (x, y) = g.pixel_center(c, r);
                assert_eq!(g.pixel_at(x, y), Some((c, r)));
            }
        }
        assert_eq!(g.pixel_at(-3.5, 11.0), None);
        assert_eq!(g.pixel_at(0.0, 20.0), None);
    }

    #[test]
    fn resample_identity() {
        let g = grid(3, 2, 1.5, vec![1.0, 2.0, 3.0, 4.0, f32::NAN, 6.0]);
        let out = resample_nearest(&g, 1.5).unwrap();
        assert!(out.bits_eq(&g));
    }

    #[test]
    fn resample_constant_to_coarser() {
        let g = grid(4, 4, 0.5, vec![7.0; 16]);
        let out = resample_nearest(&g, 1.0).unwrap();
        assert_eq!((out.width, out.height), (2, 2));
        assert_eq!(out.values, vec![7.0; 4]);
        assert_eq!(out.pixel_size, 1.0);
    }

    #[test]
    fn resample_center_on_shared_corner_takes_first_pixel() {
        let g = grid(2, 2, 1.0, vec![1.0, 2.0, 3.0, 4.0]);
        let out = resample_nearest(&g, 2.0).unwrap();
        assert_eq!((out.width, out.height), (1, 1));
        assert_eq!(out.values, vec![1.0]);
    }

    #[test]
    fn resample_to_nothing_is_error() {
        let g = grid(2, 2, 1.0, vec![1.0; 4]);
        assert!(resample_nearest(&g, 3.0).is_err());
        assert!(resample_nearest(&g, 0.0).is_err());
    }

    #[test]
    fn median_stack_cases() {
        let a = grid(1, 1, 1.0, vec![1.0]);
        let b = grid(1, 1, 1.0, vec![2.0]);
        let c = grid(1, 1, 1.0, vec![100.0]);
        let m = median_stack(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(m.values, vec![2.0]);

        let nd = grid(1, 1, 1.0, vec![f32::NAN]);
        let d = grid(1, 1, 1.0, vec![3.0]);
        let e = grid(1, 1, 1.0, vec![5.0]);
        let m = median_stack(&[a.clone(), nd.clone(), d, e]).unwrap();
        assert_eq!(m.values, vec![3.0]);

        let m = median_stack(&[a.clone(), grid(1, 1, 1.0, vec![3.0])]).unwrap();
        assert_eq!(m.values, vec![2.0]);

        let m = median_stack(&[nd.clone(), nd]).unwrap();
        assert!(m.values[0].is_nan());

        let same = grid(2, 1, 1.0, vec![4.0, 8.0]);
        let m = median_stack(&[same.clone(), same.clone(), same.clone()]).unwrap();
        assert!(m.bits_eq(&same));
    }

    #[test]
    fn median_stack_geometry_mismatch() {
        let a = grid(1, 1, 1.0, vec![1.0]);
        let b = grid(1, 1, 2.0, vec![1.0]);
        assert!(matches!(median_stack(&[a.clone(), b]), Err(Error::GeometryMismatch(_))));
        let c = grid(1, 1, 1.0, vec![1.0]).with_crs("EPSG:2056");
        assert!(matches!(median_stack(&[a, c]), Err(Error::CrsMismatch(..))));
        assert!(matches!(median_stack(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn asc_reads_header_and_nodata() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.asc");
        fs::write(
            &p,
            "NCOLS 2\nnrows 2\nxllcorner 10\nyllcorner 20\ncellsize 3\nNODATA_value -9999\n1 2\n3 -9999\n",
        )
        .unwrap();
        let g = read_grid(&p).unwrap();
        assert_eq!((g.width, g.height, g.pixel_size), (2, 2, 3.0));
        assert_eq!(g.origin_y, 26.0);
        assert_eq!(&g.values[..3], &[1.0, 2.0, 3.0]);
        assert!(g.is_nodata(g.values[3]));
        assert_eq!(g.valid_count(), 3);
    }

    #[test]
    fn asc_rejects_short_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.asc");
        fs::write(&p, "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n").unwrap();
        assert!(matches!(read_grid(&p), Err(Error::Format { .. })));
        fs::write(&p, "ncols 2\nnrows 2\nxllcorner 0\ncellsize 1\n1 2 3 4\n").unwrap();
        assert!(matches!(read_grid(&p), Err(Error::Format { .. })));
        assert!(matches!(
            read_grid(dir.path().join("missing.asc")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn raw_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.rawgrid");
        let g = grid(3, 3, 1.0, (0..9).map(|v| v as f32).collect());
        write_grid(&g, &p, GridFormat::Raw).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_grid(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn all_nodata_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(3, 2, 1.0, vec![f32::NAN; 6]);
        for (name, fmt) in [("n.asc", GridFormat::Asc), ("n.rawgrid", GridFormat::Raw)] {
            let p = dir.path().join(name);
            write_grid(&g, &p, fmt).unwrap();
            let back = read_grid(&p).unwrap();
            assert_eq!(back.valid_count(), 0);
        }
    }

    fn arb_grid() -> impl Strategy<Value = Grid> {
        (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
            proptest::collection::vec(prop_oneof![4 => -1e4f32..1e4f32, 1 => Just(f32::NAN)], w * h)
                .prop_map(move |vals| grid(w, h, 0.5, vals))
        })
    }

    proptest! {
        #[test]
        fn median_stack_permutation_invariant(
            a in proptest::collection::vec(prop_oneof![-50f32..50.0, Just(f32::NAN)], 4),
            b in proptest::collection::vec(prop_oneof![-50f32..50.0, Just(f32::NAN)], 4),
            c in proptest::collection::vec(prop_oneof![-50f32..50.0, Just(f32::NAN)], 4),
        ) {
            let (a, b, c) = (grid(2, 2, 1.0, a), grid(2, 2, 1.0, b), grid(2, 2, 1.0, c));
            let m1 = median_stack(&[a.clone(), b.clone(), c.clone()]).unwrap();
            let m2 = median_stack(&[c, a, b]).unwrap();
            prop_assert!(m1.bits_eq(&m2));
        }

        #[test]
        fn resample_values_come_from_input(g in arb_grid(), target in 0.2f64..1.5) {
            if let Ok(out) = resample_nearest(&g, target) {
                for v in &out.values {
                    prop_assert!(
                        g.is_nodata(*v) || g.values.iter().any(|x| x.to_bits() == v.to_bits())
                    );
                }
            }
        }
    }
}
