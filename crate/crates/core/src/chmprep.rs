//! Canopy height model preprocessing.
//!
//! Operators run in a fixed order: average blur, median blur, Gaussian
//! blur, then pit correction. All windows use edge-replicate padding, skip
//! missing cells, and leave the nodata mask untouched.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{par_rows, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurMethod {
    Average,
    Median,
    Gaussian,
}

/// Parameters of the iterative pit correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DengParams {
    /// Odd window size in pixels for the neighbourhood median.
    pub kernel: usize,
    pub steps: usize,
    /// Depth below the neighbourhood median (meters) marking a strong pit.
    pub high_threshold: f64,
    /// Depth marking a weak pit, kept only when connected to a strong one.
    pub low_threshold: f64,
    /// Odd Gaussian kernel applied after correction; 1 disables it.
    pub blur_kernel: usize,
    pub blur_sigma: f64,
}

impl DengParams {
    pub fn validate(&self) -> Result<()> {
        check_kernel("deng.kernel", self.kernel)?;
        check_kernel("deng.blur_kernel", self.blur_kernel)?;
        if self.steps < 1 {
            return Err(Error::InvalidParam("deng.steps must be at least 1".into()));
        }
        if !(self.low_threshold >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "deng.low_threshold must be non-negative, got {}",
                self.low_threshold
            )));
        }
        if !(self.low_threshold <= self.high_threshold) {
            return Err(Error::InvalidParam(format!(
                "deng.low_threshold {} exceeds high_threshold {}",
                self.low_threshold, self.high_threshold
            )));
        }
        if self.blur_kernel > 1 && !(self.blur_sigma > 0.0) {
            return Err(Error::InvalidParam("deng.blur_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// The full preprocessing chain. Kernel sizes of 0 disable an operator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocParams {
    pub avg_kernel: usize,
    pub median_kernel: usize,
    pub gauss_kernel: usize,
    pub gauss_sigma: f64,
    /// Pit correction; `deng = false` in a config turns it off.
    #[serde(with = "deng_toggle")]
    pub deng: Option<DengParams>,
}

mod deng_toggle {
    use super::DengParams;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Toggle {
        On(DengParams),
        Off(bool),
    }

    pub fn serialize<S: Serializer>(v: &Option<DengParams>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(p) => Toggle::On(*p),
            None => Toggle::Off(false),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DengParams>, D::Error> {
        match Toggle::deserialize(d)? {
            Toggle::On(p) => Ok(Some(p)),
            Toggle::Off(false) => Ok(None),
            Toggle::Off(true) => Err(serde::de::Error::custom("deng = true needs a [preprocess.deng] table")),
        }
    }
}

impl PreprocParams {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [
            ("avg_kernel", self.avg_kernel),
            ("median_kernel", self.median_kernel),
            ("gauss_kernel", self.gauss_kernel),
        ] {
            if k != 0 {
                check_kernel(name, k)?;
            }
        }
        if self.gauss_kernel > 0 && !(self.gauss_sigma > 0.0) {
            return Err(Error::InvalidParam(
                "gauss_sigma must be positive when gauss_kernel is set".into(),
            ));
        }
        if self.gauss_kernel == 0 && self.gauss_sigma != 0.0 {
            return Err(Error::InvalidParam("gauss_sigma given without gauss_kernel".into()));
        }
        if let Some(d) = &self.deng {
            d.validate()?;
        }
        Ok(())
    }
}

fn check_kernel(name: &str, k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidParam(format!(
            "{name} must be a positive odd pixel count, got {k}"
        )));
    }
    Ok(())
}

/// Window statistic over a `kernel x kernel` neighbourhood.
pub fn blur(grid: &Grid, method: BlurMethod, kernel: usize, sigma: Option<f64>) -> Result<Grid> {
    check_kernel("kernel", kernel)?;
    match (method, sigma) {
        (BlurMethod::Gaussian, Some(s)) if s > 0.0 && s.is_finite() => {}
        (BlurMethod::Gaussian, _) => return Err(Error::InvalidParam("gaussian blur needs a positive sigma".into())),
        (_, Some(_)) => return Err(Error::InvalidParam(format!("{method:?} blur takes no sigma"))),
        (_, None) => {}
    }
    if kernel == 1 {
        return Ok(grid.clone());
    }
    let half = (kernel / 2) as isize;
    let out = match method {
        BlurMethod::Average => window_map(grid, half, |_, v| {
            let sum: f64 = v.iter().map(|&(_, x)| x as f64).sum();
            (sum / v.len() as f64) as f32
        }),
        BlurMethod::Median => window_map(grid, half, |buf, v| {
            buf.clear();
            buf.extend(v.iter().map(|&(_, x)| x));
            median_in_place(buf)
        }),
        BlurMethod::Gaussian => {
            let weights = gaussian_weights(half, sigma.unwrap());
            window_map(grid, half, |_, v| {
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for &(k, x) in v {
                    let w = weights[k];
                    num += w * x as f64;
                    den += w;
                }
                (num / den) as f32
            })
        }
    };
    Ok(out)
}

fn gaussian_weights(half: isize, sigma: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(((2 * half + 1) * (2 * half + 1)) as usize);
    for dy in -half..=half {
        for dx in -half..=half {
            let d2 = (dx * dx + dy * dy) as f64;
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    w
}

/// Applies `stat` to the valid cells of every window. The closure receives
/// scratch space and `(kernel_offset_index, value)` pairs; missing centers
/// stay missing.
fn window_map<F>(grid: &Grid, half: isize, stat: F) -> Grid
where
    F: Fn(&mut Vec<f32>, &[(usize, f32)]) -> f32 + Sync,
{
    let (w, h) = (grid.width as isize, grid.height as isize);
    let values = par_rows(grid.width, grid.height, |row, buf| {
        let mut window = Vec::with_capacity(((2 * half + 1) * (2 * half + 1)) as usize);
        let mut scratch = Vec::with_capacity(window.capacity());
        let r = row as isize;
        for (col, out) in buf.iter_mut().enumerate() {
            let center = grid.get(col, row);
            if grid.is_nodata(center) {
                *out = grid.nodata;
                continue;
            }
            window.clear();
            let c = col as isize;
            let mut k = 0;
            for dy in -half..=half {
                let rr = (r + dy).clamp(0, h - 1) as usize;
                let line = &grid.values[rr * grid.width..(rr + 1) * grid.width];
                for dx in -half..=half {
                    let cc = (c + dx).clamp(0, w - 1) as usize;
                    let v = line[cc];
                    if !grid.is_nodata(v) {
                        window.push((k, v));
                    }
                    k += 1;
                }
            }
            *out = stat(&mut scratch, &window);
        }
    });
    grid.like(values)
}

/// Median of a non-empty buffer; reorders it.
fn median_in_place(buf: &mut [f32]) -> f32 {
    let n = buf.len();
    let mid = n / 2;
    let (left, m, _) = buf.select_nth_unstable_by(mid, f32::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = left.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        ((lower as f64 + upper as f64) / 2.0) as f32
    }
}

/// Iterative hysteresis pit filling followed by a Gaussian blur.
///
/// Each step compares every pixel to the median of its window without the
/// center. Pixels deeper than `high_threshold` below that median are strong
/// pits; pixels deeper than `low_threshold` are weak pits and are filled only
/// when 8-connected (through other weak pits) to a strong one. All fills in
/// a step read the grid as it was before the step.
pub fn deng_correct(grid: &Grid, params: &DengParams) -> Result<Grid> {
    params.validate()?;
    let half = (params.kernel / 2) as isize;
    let mut current = grid.clone();
    for _ in 0..params.steps {
        let medians = neighbour_medians(&current, half);
        let (w, h) = (current.width, current.height);
        let n = w * h;
        // 0 = none, 1 = weak, 2 = strong
        let mut class = vec![0u8; n];
        for i in 0..n {
            let v = current.values[i];
            let m = medians[i];
            if current.is_nodata(v) || m.is_nan() {
                continue;
            }
            let depth = m as f64 - v as f64;
            if depth > params.high_threshold {
                class[i] = 2;
            } else if depth > params.low_threshold {
                class[i] = 1;
            }
        }
        let mut fill = vec![false; n];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for i in 0..n {
            if class[i] == 2 {
                fill[i] = true;
                queue.push_back(i);
            }
        }
        if queue.is_empty() {
            continue;
        }
        while let Some(i) = queue.pop_front() {
            let (c, r) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (cc, rr) = (c + dx, r + dy);
                    if cc < 0 || rr < 0 || cc >= w as isize || rr >= h as isize {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if !fill[j] && class[j] >= 1 {
                        fill[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        let mut next = current.values.clone();
        for i in 0..n {
            if fill[i] {
                next[i] = medians[i];
            }
        }
        current = current.like(next);
    }
    if params.blur_kernel > 1 {
        current = blur(
            &current,
            BlurMethod::Gaussian,
            params.blur_kernel,
            Some(params.blur_sigma),
        )?;
    }
    Ok(current)
}

/// Median of each window excluding its center offset; NaN where the center
/// is missing or no neighbour is valid.
fn neighbour_medians(grid: &Grid, half: isize) -> Vec<f32> {
    let center_k = ((2 * half + 1) * half + half) as usize;
    let m = window_map(grid, half, |buf, v| {
        buf.clear();
        buf.extend(v.iter().filter(|&&(k, _)| k != center_k).map(|&(_, x)| x));
        if buf.is_empty() {
            f32::NAN
        } else {
            median_in_place(buf)
        }
    });
    m.values
        .into_iter()
        .map(|v| if grid.is_nodata(v) { f32::NAN } else { v })
        .collect()
}

/// Runs the enabled operators in order: average, median, Gaussian, pit
/// correction.
pub fn preprocess(grid: &Grid, params: &PreprocParams) -> Result<Grid> {
    params.validate()?;
    let mut out = grid.clone();
    if params.avg_kernel > 0 {
        out = blur(&out, BlurMethod::Average, params.avg_kernel, None)?;
    }
    if params.median_kernel > 0 {
        out = blur(&out, BlurMethod::Median, params.median_kernel, None)?;
    }
    if params.gauss_kernel > 0 {
        out = blur(
            &out,
            BlurMethod::Gaussian,
            params.gauss_kernel,
            Some(params.gauss_sigma),
        )?;
    }
    if let Some(deng) = &params.deng {
        out = deng_correct(&out, deng)?;
    }
    Ok(out)
}
