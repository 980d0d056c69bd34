//! Config-driven command-line front end.
//!
//! Every subcommand reads its inputs and outputs from the `[paths]` section
//! of a TOML config; `--set section.key=value` overrides any entry. Exit
//! codes: 0 success, 1 usage or config error, 2 data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::chmprep::{preprocess, DengParams, PreprocParams};
use crate::error::Error;
use crate::evalmetrics::{
    chm_cover, cover_fraction_r2, default_thresholds, evaluate_detection, pixel_metrics, pr_curve, sweep_threshold,
    write_json, write_pr_csv, write_sweep_csv, CoverEvalConfig, SweepMetric,
};
use crate::heatmap::{render_targets, to_cover, to_points, HeatmapConfig};
use crate::labels::{
    choose_strategy, gedi_negative_filter, read_frames_csv, read_gedi_csv, split_frames, write_gedi_csv, PolygonSet,
};
use crate::optimize::{
    canonical_space, extract, optimize_params, write_history_csv, ExtractionObjective, ExtractionParams,
    OptimizerConfig,
};
use crate::peakdetect::{DetectionParams, PointSet};
use crate::raster::{median_stack, read_grid, resample_nearest, write_grid, Grid, GridFormat};

#[derive(Debug, Parser)]
#[command(
    name = "treemap",
    version,
    about = "Tree-center mining, heatmap targets and evaluation on canopy rasters"
)]
pub struct Cli {
    /// Pipeline config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set detection.threshold=2.5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads for internal parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// CHM -> preprocessed CHM
    Prep,
    /// CHM -> pseudo-label points
    Extract,
    /// CHM + calibration labels -> best parameters and trial history
    Optimize,
    /// labels + CHM -> detection strategy report
    Strategy,
    /// points + uncertainty -> target heatmap
    Render,
    /// heatmap -> points
    Detect,
    /// heatmap -> binary cover grid
    Cover,
    /// grids -> pixel-wise median grid
    Stack,
    /// frames -> train/test split
    Split,
    /// GEDI records -> treeless footprints
    GediFilter,
    /// predicted + reference points -> detection metrics
    EvalDet,
    /// cover + CHM -> R² report and PR table
    EvalCover,
    /// score grid + CHM -> best threshold
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Matching distance for detection evaluation, meters.
    pub detection_max_dist: f64,
    /// Matching distance for parameter calibration, meters.
    pub calibration_max_dist: f64,
    pub height_threshold: f64,
    pub window: f64,
    pub min_valid_fraction: f64,
    pub thresholds: Vec<f64>,
    pub metric: SweepMetric,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            detection_max_dist: 15.0,
            calibration_max_dist: 5.0,
            height_threshold: 3.0,
            window: 25.0,
            min_valid_fraction: 0.5,
            thresholds: default_thresholds(),
            metric: SweepMetric::R2,
        }
    }
}

impl EvaluationConfig {
    pub fn cover(&self) -> CoverEvalConfig {
        CoverEvalConfig {
            window: self.window,
            height_threshold: self.height_threshold,
            min_valid_fraction: self.min_valid_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelsConfig {
    /// Pseudo-labels on lower CHM pixels are dropped, meters.
    pub min_height: f64,
}

impl Default for LabelsConfig {
    fn default() -> Self {
        LabelsConfig { min_height: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub threshold: f64,
    /// Full suppression window for heatmap peaks, meters.
    pub min_distance: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            threshold: 0.5,
            min_distance: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub budget: usize,
    pub n_init: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        OptimizerSection {
            budget: d.budget,
            n_init: d.n_init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { fraction: 0.02 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub chm: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub polygons: Option<PathBuf>,
    pub uncertainty: Option<PathBuf>,
    pub points: Option<PathBuf>,
    pub heatmap: Option<PathBuf>,
    pub cover: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub frames: Option<PathBuf>,
    pub gedi: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds every random choice of a run.
    pub seed: u64,
    pub preprocess: PreprocParams,
    pub detection: DetectionParams,
    pub heatmap: HeatmapConfig,
    pub evaluation: EvaluationConfig,
    pub labels: LabelsConfig,
    pub decode: DecodeConfig,
    pub optimizer: OptimizerSection,
    pub split: SplitConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            preprocess: PreprocParams {
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
            },
            detection: DetectionParams::default(),
            heatmap: HeatmapConfig::default(),
            evaluation: EvaluationConfig::default(),
            labels: LabelsConfig::default(),
            decode: DecodeConfig::default(),
            optimizer: OptimizerSection::default(),
            split: SplitConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParam(m) => CliError::Config(m),
            other => CliError::Data(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `section.key=value`; the value is read as a TOML literal and falls
/// back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`; tables merge, anything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Built-in defaults, then the config file (if any), then overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<PipelineConfig> {
    let mut table = toml::Table::try_from(PipelineConfig::default()).expect("defaults serialize to a table");
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    merge(&mut table, file);
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    PipelineConfig::deserialize(table).map_err(|e| CliError::Config(format!("config: {e}")))
}

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    match p {
        Some(p) if !p.as_os_str().is_empty() => Ok(p),
        _ => Err(CliError::Config(format!("missing config key `paths.{key}`"))),
    }
}

fn write_points(points: &PointSet, path: &Path) -> CliResult<()> {
    let geojson = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("geojson"));
    if geojson {
        points.write_geojson(path)?;
    } else {
        points.write_csv(path)?;
    }
    Ok(())
}

fn save_grid(grid: &Grid, path: &Path) -> CliResult<()> {
    write_grid(grid, path, GridFormat::from_path(path)?)?;
    Ok(())
}

fn read_polygons(p: &Option<PathBuf>) -> CliResult<PolygonSet> {
    Ok(match p {
        Some(p) => PolygonSet::read_geojson(p)?,
        None => PolygonSet::default(),
    })
}

/// Brings `chm` to the pixel size of `target` when they differ.
fn match_resolution(chm: Grid, target: &Grid) -> CliResult<Grid> {
    if chm.pixel_size == target.pixel_size {
        Ok(chm)
    } else {
        Ok(resample_nearest(&chm, target.pixel_size)?)
    }
}

fn run_command(cmd: Command, cfg: &PipelineConfig) -> CliResult<()> {
    let paths = &cfg.paths;
    match cmd {
        Command::Prep => {
            let chm = read_grid(need(&paths.chm, "chm")?)?;
            let out = need(&paths.output, "output")?;
            save_grid(&preprocess(&chm, &cfg.preprocess)?, out)
        }
        Command::Extract => {
            let chm = read_grid(need(&paths.chm, "chm")?)?;
            let out = need(&paths.output, "output")?;
            let polygons = read_polygons(&paths.polygons)?;
            let params = ExtractionParams {
                preprocess: cfg.preprocess,
                detection: cfg.detection,
            };
            params.validate()?;
            let pts = extract(&chm, &polygons, cfg.labels.min_height, &params)?;
            log::info!("extracted {} points", pts.len());
            write_points(&pts, out)
        }
        Command::Optimize => {
            let chm = read_grid(need(&paths.chm, "chm")?)?;
            let labels = PointSet::read_csv(need(&paths.labels, "labels")?)?.with_crs(chm.crs_id.clone());
            let out = need(&paths.output, "output")?;
            let history_path = need(&paths.history, "history")?;
            let polygons = read_polygons(&paths.polygons)?.with_crs(chm.crs_id.clone());
            let mut objective = ExtractionObjective::new(
                &chm,
                &labels,
                &polygons,
                cfg.labels.min_height,
                cfg.evaluation.calibration_max_dist,
            )?;
            let space = canonical_space();
            let ocfg = OptimizerConfig {
                budget: cfg.optimizer.budget,
                n_init: cfg.optimizer.n_init,
                seed: cfg.seed,
            };
            let result = optimize_params(&space, |a| objective.evaluate_assignment(a), &ocfg)?;
            log::info!("best trial {} objective {}", result.best.index, result.best.objective);
            write_history_csv(&space, &result.history, history_path)?;
            let best = ExtractionParams::from_assignment(&result.best.params)?;
            let text = toml::to_string(&best).map_err(|e| CliError::Config(e.to_string()))?;
            std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
            Ok(())
        }
        Command::Strategy => {
            let chm = read_grid(need(&paths.chm, "chm")?)?;
            let labels = PointSet::read_csv(need(&paths.labels, "labels")?)?.with_crs(chm.crs_id.clone());
            let out = need(&paths.output, "output")?;
            let report = choose_strategy(&labels, &chm)?;
            log::info!("pearson r {} -> {:?}", report.pearson_r, report.recommendation);
            Ok(write_json(&report, out)?)
        }
        Command::Render => {
            let s = read_grid(need(&paths.uncertainty, "uncertainty")?)?;
            let pts = PointSet::read_csv(need(&paths.points, "points")?)?.with_crs(s.crs_id.clone());
            let out = need(&paths.output, "output")?;
            save_grid(&render_targets(&pts, &s, &cfg.heatmap)?, out)
        }
        Command::Detect => {
            let heat = read_grid(need(&paths.heatmap, "heatmap")?)?;
            let out = need(&paths.output, "output")?;
            let pts = to_points(&heat, cfg.decode.threshold, cfg.decode.min_distance)?;
            write_points(&pts, out)
        }
        Command::Cover => {
            let heat = read_grid(need(&paths.heatmap, "heatmap")?)?;
            let out = need(&paths.output, "output")?;
            save_grid(&to_cover(&heat, cfg.decode.threshold), out)
        }
        Command::Stack => {
            if paths.inputs.is_empty() {
                return Err(CliError::Config("missing config key `paths.inputs`".into()));
            }
            let out = need(&paths.output, "output")?;
            let grids = paths.inputs.iter().map(read_grid).collect::<crate::Result<Vec<_>>>()?;
            save_grid(&median_stack(&grids)?, out)
        }
        Command::Split => {
            let frames = read_frames_csv(need(&paths.frames, "frames")?)?;
            let out = need(&paths.output, "output")?;
            let split = split_frames(&frames, cfg.split.fraction, cfg.seed)?;
            log::info!("{} train / {} test frames", split.train.len(), split.test.len());
            Ok(write_json(&split, out)?)
        }
        Command::GediFilter => {
            let records = read_gedi_csv(need(&paths.gedi, "gedi")?)?;
            let out = need(&paths.output, "output")?;
            let kept = gedi_negative_filter(&records);
            log::info!("kept {} of {} footprints", kept.len(), records.len());
            Ok(write_gedi_csv(&kept, out)?)
        }
        Command::EvalDet => {
            let pred = PointSet::read_csv(need(&paths.pred, "pred")?)?;
            let reference = PointSet::read_csv(need(&paths.reference, "reference")?)?;
            let out = need(&paths.output, "output")?;
            let m = evaluate_detection(&pred, &reference, cfg.evaluation.detection_max_dist)?;
            log::info!("f1 {} counting accuracy {}", m.f1, m.counting_accuracy);
            Ok(write_json(&m, out)?)
        }
        Command::EvalCover => {
            let cover = read_grid(need(&paths.cover, "cover")?)?;
            let chm = match_resolution(read_grid(need(&paths.chm, "chm")?)?, &cover)?;
            let out = need(&paths.output, "output")?;
            let ev = cfg.evaluation.cover();
            let r2 = cover_fraction_r2(&cover, &chm, &ev)?;
            let pixels = pixel_metrics(&cover, &chm_cover(&chm, ev.height_threshold))?;
            log::info!("cover R² {} over {} windows", r2.r2, r2.windows.len());
            write_json(
                &serde_json::json!({ "r2": r2.r2, "windows": r2.windows, "pixel": pixels }),
                out,
            )?;
            if let Some(table) = &paths.table {
                let rows = pr_curve(&cover, &chm, &cfg.evaluation.thresholds, ev.height_threshold)?;
                write_pr_csv(&rows, table)?;
            }
            Ok(())
        }
        Command::Sweep => {
            let score = read_grid(need(&paths.heatmap, "heatmap")?)?;
            let chm = match_resolution(read_grid(need(&paths.chm, "chm")?)?, &score)?;
            let out = need(&paths.output, "output")?;
            let table = need(&paths.table, "table")?;
            let res = sweep_threshold(
                &score,
                &chm,
                &cfg.evaluation.thresholds,
                cfg.evaluation.metric,
                &cfg.evaluation.cover(),
            )?;
            log::info!("best threshold {} score {}", res.best_threshold, res.best_score);
            write_sweep_csv(&res, table)?;
            Ok(write_json(
                &serde_json::json!({ "best_threshold": res.best_threshold, "best_score": res.best_score, "metric": cfg.evaluation.metric }),
                out,
            )?)
        }
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();

    let result = load_config(cli.config.as_deref(), &cli.overrides).and_then(|cfg| {
        let resolved = toml::to_string(&cfg).unwrap_or_default();
        log::info!("command {:?}, seed {}", cli.command, cfg.seed);
        log::info!("resolved config:\n{resolved}");
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.threads {
            if n == 0 {
                return Err(CliError::Config("--threads must be at least 1".into()));
            }
            pool = pool.num_threads(n);
        }
        let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
        pool.install(|| run_command(cli.command, &cfg))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_values() {
        let cfg = load_config(
            None,
            &[
                "detection.threshold=2.5".into(),
                "detection.mode=adaptive".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.detection.threshold, 2.5);
        assert_eq!(cfg.detection.mode, crate::WindowMode::Adaptive);
        assert_eq!(cfg.seed, 9);
        let cfg = load_config(None, &["paths.output=out dir/x.csv".into()]).unwrap();
        assert_eq!(cfg.paths.output.unwrap(), PathBuf::from("out dir/x.csv"));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = load_config(
            None,
            &["preprocess.deng.kernel=5".into(), "preprocess.median_kernel=5".into()],
        )
        .unwrap();
        let deng = cfg.preprocess.deng.unwrap();
        assert_eq!((deng.kernel, deng.high_threshold), (5, 10.0));
        assert_eq!(cfg.preprocess.median_kernel, 5);
        let cfg = load_config(None, &["preprocess.deng=false".into()]).unwrap();
        assert_eq!(cfg.preprocess.deng, None);
        assert!(load_config(None, &["preprocess.deng=true".into()]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            load_config(None, &["detection.bogus=1".into()]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            load_config(None, &["nosection".into()]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn missing_path_names_key() {
        let err = run_command(Command::Prep, &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("paths.chm"));
    }

    #[test]
    fn default_round_trips_through_toml() {
        let text = toml::to_string(&PipelineConfig::default()).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, PipelineConfig::default());
    }

    #[test]
    fn error_classes() {
        assert_eq!(CliError::from(Error::InvalidParam("x".into())).exit_code(), 1);
        assert_eq!(CliError::from(Error::Empty("x".into())).exit_code(), 2);
    }
}
