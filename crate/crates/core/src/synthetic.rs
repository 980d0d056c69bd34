//! Seeded synthetic forests with known tree centers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::chmprep::{DengParams, PreprocParams};
use crate::peakdetect::{DetectionParams, PointSet, TreePoint};
use crate::raster::Grid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub n_trees: usize,
    pub apex_range: (f64, f64),
    pub radius_range: (f64, f64),
    /// Extra clearance between crown edges in meters.
    pub gap: f64,
    pub noise_sd: f64,
    pub n_pits: usize,
    pub pit_depth: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 512,
            height: 512,
            pixel_size: 0.5,
            n_trees: 200,
            apex_range: (8.0, 30.0),
            radius_range: (2.0, 6.0),
            gap: 4.0,
            noise_sd: 0.2,
            n_pits: 50,
            pit_depth: 15.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub chm: Grid,
    /// Cone apexes; `value` holds the apex height.
    pub trees: PointSet,
    pub radii: Vec<f64>,
}

/// Cone crowns `h = H (1 - d / R)` on bare ground, with Gaussian noise and
/// single-pixel pits. Crowns never touch. Heights are clamped at 0.
pub fn forest_scene(spec: &SceneSpec, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = spec.pixel_size;
    let (wm, hm) = (spec.width as f64 * ps, spec.height as f64 * ps);
    let mut trees: Vec<TreePoint> = Vec::with_capacity(spec.n_trees);
    let mut radii: Vec<f64> = Vec::with_capacity(spec.n_trees);
    let mut attempts = 0usize;
    while trees.len() < spec.n_trees {
        attempts += 1;
        assert!(attempts < 1_000_000, "scene too crowded for {} trees", spec.n_trees);
        let r = rng.gen_range(spec.radius_range.0..=spec.radius_range.1);
        let x = rng.gen_range(r..wm - r);
        let y = rng.gen_range(r..hm - r);
        let clear = trees
            .iter()
            .zip(&radii)
            .all(|(t, &rt)| (t.x - x).hypot(t.y - y) >= r + rt + spec.gap);
        if clear {
            let apex = rng.gen_range(spec.apex_range.0..=spec.apex_range.1);
            trees.push(TreePoint::new(x, y, apex));
            radii.push(r);
        }
    }

    let mut chm = Grid::filled(spec.width, spec.height, 0.0, hm, ps, 0.0).expect("valid scene geometry");
    for (t, &r) in trees.iter().zip(&radii) {
        let c0 = (((t.x - r) / ps).floor().max(0.0)) as usize;
        let c1 = (((t.x + r) / ps).ceil() as usize).min(spec.width - 1);
        let r0 = (((hm - t.y - r) / ps).floor().max(0.0)) as usize;
        let r1 = (((hm - t.y + r) / ps).ceil() as usize).min(spec.height - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (px, py) = chm.pixel_center(col, row);
                let d = (px - t.x).hypot(py - t.y);
                if d < r {
                    let i = chm.index(col, row);
                    chm.values[i] = chm.values[i].max((t.value * (1.0 - d / r)) as f32);
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sd).expect("finite noise sd");
    for v in chm.values.iter_mut() {
        *v = (*v as f64 + noise.sample(&mut rng)).max(0.0) as f32;
    }
    for _ in 0..spec.n_pits {
        let i = rng.gen_range(0..chm.len());
        chm.values[i] = (chm.values[i] as f64 - spec.pit_depth).max(0.0) as f32;
    }
    Scene {
        chm,
        trees: PointSet::new(trees),
        radii,
    }
}

/// Preprocessing known to suit [`forest_scene`]: a 3x3 median and one pass
/// of pit filling.
pub fn oracle_preproc() -> PreprocParams {
    PreprocParams {
        median_kernel: 3,
        deng: Some(DengParams {
            kernel: 3,
            steps: 1,
            high_threshold: 10.0,
            low_threshold: 5.0,
            blur_kernel: 1,
            blur_sigma: 1.0,
        }),
        ..Default::default()
    }
}

/// Height-adaptive detection known to suit [`forest_scene`].
pub fn oracle_detection() -> DetectionParams {
    DetectionParams::adaptive(12.0, 14.0, 0.5, 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_seeded_and_separated() {
        let spec = SceneSpec {
            n_trees: 40,
            width: 200,
            height: 200,
            ..Default::default()
        };
        let a = forest_scene(&spec, 3);
        let b = forest_scene(&spec, 3);
        assert!(a.chm.bits_eq(&b.chm));
        assert_eq!(a.trees, b.trees);
        assert_eq!(a.trees.len(), 40);
        for i in 0..a.trees.len() {
            for j in 0..i {
                let d = a.trees.points[i].distance(&a.trees.points[j]);
                assert!(d >= a.radii[i] + a.radii[j] + spec.gap);
            }
        }
        assert!(a.chm.values.iter().all(|&v| v >= 0.0));
        assert!(!forest_scene(&spec, 4).chm.bits_eq(&a.chm));
    }
}
