//! WebAssembly bindings for the static demo page in `www/`.
//!
//! A [`Scene`] holds a small synthetic forest. The page renders its heatmap
//! target, thresholds it into cover and decodes it back into tree points.

use treemap::evalmetrics::evaluate_detection;
use treemap::heatmap::{render_targets, to_cover, to_points, HeatmapConfig};
use treemap::synthetic::{forest_scene, SceneSpec};
use treemap::{Grid, PointSet};
use wasm_bindgen::prelude::*;

const PIXEL_SIZE: f64 = 1.0;

#[wasm_bindgen]
pub struct Scene {
    truth: PointSet,
    radii: Vec<f64>,
    base: Grid,
    heat: Grid,
}

#[wasm_bindgen]
impl Scene {
    /// `size` pixels square at 1 m, with `n_trees` planted crowns.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, n_trees: usize) -> Result<Scene, String> {
        let size = size.clamp(32, 512);
        let area = (size * size) as f64;
        // Crowns need roughly 250 m² each to fit without touching.
        let n = n_trees.min((area / 250.0) as usize).max(1);
        let spec = SceneSpec {
            width: size,
            height: size,
            pixel_size: PIXEL_SIZE,
            n_trees: n,
            n_pits: 0,
            ..Default::default()
        };
        let scene = forest_scene(&spec, seed as u64);
        let base = scene.chm.like(vec![0.0; scene.chm.len()]);
        Ok(Scene {
            truth: scene.trees,
            radii: scene.radii,
            heat: base.clone(),
            base,
        })
    }

    pub fn width(&self) -> usize {
        self.base.width
    }

    pub fn height(&self) -> usize {
        self.base.height
    }

    /// Planted centers as `[col, row, ...]` in fractional pixels.
    pub fn truth(&self) -> Vec<f64> {
        self.to_pixels(&self.truth)
    }

    /// Renders the target heatmap. Wider crowns get more uncertainty,
    /// scaled by `gain`.
    pub fn render(&mut self, sigma: f64, gain: f64) -> Result<Vec<f32>, String> {
        let mut s = self.base.clone();
        for (t, r) in self.truth.points.iter().zip(&self.radii) {
            if let Some((c, row)) = s.pixel_at(t.x, t.y) {
                let i = s.index(c, row);
                s.values[i] = (gain * (r - 2.0) / 4.0) as f32;
            }
        }
        let cfg = HeatmapConfig {
            sigma_m: sigma,
            pixel_size: PIXEL_SIZE,
            ..Default::default()
        };
        self.heat = render_targets(&self.truth, &s, &cfg).map_err(|e| e.to_string())?;
        Ok(self.heat.values.clone())
    }

    /// Binary cover of the last rendered heatmap.
    pub fn cover(&self, threshold: f64) -> Vec<f32> {
        to_cover(&self.heat, threshold).values
    }

    /// Decoded points as `[col, row, ...]`.
    pub fn decode(&self, threshold: f64, min_distance: f64) -> Result<Vec<f64>, String> {
        let pts = to_points(&self.heat, threshold, min_distance).map_err(|e| e.to_string())?;
        Ok(self.to_pixels(&pts))
    }

    /// `[precision, recall, f1]` of the decoded points against the planted
    /// centers.
    pub fn score(&self, threshold: f64, min_distance: f64, max_dist: f64) -> Result<Vec<f64>, String> {
        let pts = to_points(&self.heat, threshold, min_distance).map_err(|e| e.to_string())?;
        let m = evaluate_detection(&pts, &self.truth, max_dist).map_err(|e| e.to_string())?;
        Ok(vec![m.precision, m.recall, m.f1])
    }
}

impl Scene {
    fn to_pixels(&self, pts: &PointSet) -> Vec<f64> {
        let g = &self.base;
        pts.points
            .iter()
            .flat_map(|p| [(p.x - g.origin_x) / g.pixel_size, (g.origin_y - p.y) / g.pixel_size])
            .collect()
    }
}
