//! Individual tree mapping from canopy rasters.
//!
//! The crate covers the non-neural half of a heatmap-based tree detector:
//!
//! - [`raster`]: the georeferenced [`Grid`] type, ESRI ASCII / raw I/O,
//!   nearest-neighbour resampling and pixel-wise median stacking.
//! - [`chmprep`]: canopy height model smoothing and pit correction.
//! - [`peakdetect`]: greedy non-maximum suppression with fixed or
//!   height-adaptive windows, producing a [`PointSet`].
//! - [`labels`]: building/height post-filters, GEDI negative-footprint
//!   filtering, frame splitting and detection-strategy analysis.
//! - [`heatmap`]: Gaussian target rendering with uncertainty-scaled kernels,
//!   the training loss with analytic gradients, and heatmap decoding.
//! - [`evalmetrics`]: one-to-one point matching, detection and pixel metrics,
//!   cover-fraction R² and threshold sweeps.
//! - [`optimize`]: a seeded GP / expected-improvement optimizer over the
//!   extraction parameters.
//! - [`cli`]: the config-driven command-line front end.
//!
//! [`synthetic`] generates seeded forest scenes with known tree centers for
//! testing and benchmarking.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chmprep;
pub mod cli;
mod error;
pub mod evalmetrics;
pub mod heatmap;
pub mod labels;
pub mod optimize;
pub mod peakdetect;
pub mod raster;
pub mod synthetic;

pub use error::{Error, Result};
pub use peakdetect::{DetectionParams, PointSet, TreePoint, WindowMode};
pub use raster::{Frame, Grid, GridFormat};
