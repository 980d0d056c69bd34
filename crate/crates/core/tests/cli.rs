use std::path::Path;
use std::process::{Command, Output};

use treemap::raster::write_grid;
use treemap::synthetic::{forest_scene, SceneSpec};
use treemap::{Grid, GridFormat, PointSet, TreePoint};

fn treemap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treemap"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_points() -> PointSet {
    PointSet::new(vec![
        TreePoint::new(10.0, 10.0, 12.0),
        TreePoint::new(40.0, 25.0, 20.0),
        TreePoint::new(70.0, 60.0, 8.0),
    ])
}

#[test]
fn identical_point_files_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    small_points().write_csv(dir.path().join("pts.csv")).unwrap();
    let out = treemap(
        dir.path(),
        &[
            "eval-det",
            "--set",
            "paths.pred=\"pts.csv\"",
            "--set",
            "paths.reference=\"pts.csv\"",
            "--set",
            "paths.output=\"m.json\"",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = json(&dir.path().join("m.json"));
    assert_eq!(m["tp"], 3);
    assert_eq!(m["fn"], 0);
    assert_eq!(m["f1"], 1.0);
    assert_eq!(m["counting_accuracy"], 1.0);
}

#[test]
fn missing_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = treemap(dir.path(), &["extract", "--set", "paths.output=\"x.csv\""]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("paths.chm"), "{}", stderr(&out));
}

#[test]
fn unknown_key_and_bad_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = treemap(dir.path(), &["detect", "--set", "decode.treshold=0.4"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("treshold"), "{}", stderr(&out));

    std::fs::write(
        dir.path().join("h.asc"),
        "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 3\n0 1\n",
    )
    .unwrap();
    let out = treemap(
        dir.path(),
        &[
            "detect",
            "--set",
            "paths.heatmap=\"h.asc\"",
            "--set",
            "paths.output=\"p.csv\"",
            "--set",
            "decode.min_distance=-1",
        ],
    );
    assert_eq!(code(&out), 1);

    let out = treemap(dir.path(), &["--threads", "0", "detect"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unreadable_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = treemap(
        dir.path(),
        &[
            "prep",
            "--set",
            "paths.chm=\"absent.asc\"",
            "--set",
            "paths.output=\"o.asc\"",
        ],
    );
    assert_eq!(code(&out), 2);

    std::fs::write(dir.path().join("broken.asc"), "ncols 3\nnrows 2\n1 2\n").unwrap();
    let out = treemap(
        dir.path(),
        &[
            "prep",
            "--set",
            "paths.chm=\"broken.asc\"",
            "--set",
            "paths.output=\"o.asc\"",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn overrides_beat_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut heat = Grid::filled(20, 20, 0.0, 60.0, 3.0, 0.0).unwrap();
    heat.values[5 * 20 + 5] = 0.4;
    heat.values[12 * 20 + 14] = 0.9;
    write_grid(&heat, dir.path().join("h.asc"), GridFormat::Asc).unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[decode]\nthreshold = 0.3\n\n[paths]\nheatmap = \"h.asc\"\noutput = \"p.csv\"\n",
    )
    .unwrap();

    let out = treemap(dir.path(), &["detect", "--config", "run.toml"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(PointSet::read_csv(dir.path().join("p.csv")).unwrap().len(), 2);

    let out = treemap(
        dir.path(),
        &["detect", "--config", "run.toml", "--set", "decode.threshold=0.5"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(PointSet::read_csv(dir.path().join("p.csv")).unwrap().len(), 1);
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        width: 240,
        height: 240,
        n_trees: 40,
        ..Default::default()
    };
    let scene = forest_scene(&spec, 11);
    write_grid(&scene.chm, dir.path().join("chm.rawgrid"), GridFormat::Raw).unwrap();
    let s = Grid::filled(40, 40, 0.0, 120.0, 3.0, 0.0).unwrap();
    write_grid(&s, dir.path().join("s.asc"), GridFormat::Asc).unwrap();

    let steps: [&[&str]; 4] = [
        &[
            "extract",
            "--set",
            "paths.chm=\"chm.rawgrid\"",
            "--set",
            "paths.output=\"labels.csv\"",
        ],
        &[
            "render",
            "--set",
            "paths.points=\"labels.csv\"",
            "--set",
            "paths.uncertainty=\"s.asc\"",
            "--set",
            "paths.output=\"heat.asc\"",
        ],
        &[
            "detect",
            "--set",
            "paths.heatmap=\"heat.asc\"",
            "--set",
            "paths.output=\"decoded.geojson\"",
        ],
        &[
            "cover",
            "--set",
            "paths.heatmap=\"heat.asc\"",
            "--set",
            "paths.output=\"cover.asc\"",
        ],
    ];
    let outputs = ["labels.csv", "heat.asc", "decoded.geojson", "cover.asc"];
    let mut runs = Vec::new();
    for threads in ["1", "3"] {
        for step in steps {
            let mut args = vec!["--threads", threads];
            args.extend_from_slice(step);
            let out = treemap(dir.path(), &args);
            assert_eq!(code(&out), 0, "{step:?}: {}", stderr(&out));
        }
        runs.push(outputs.map(|f| std::fs::read(dir.path().join(f)).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let labels = PointSet::read_csv(dir.path().join("labels.csv")).unwrap();
    assert!(labels.len() > 20, "{} labels", labels.len());
    let decoded = String::from_utf8(runs[0][2].clone()).unwrap();
    assert!(decoded.contains("FeatureCollection"));
}
