use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn topo_nav(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topo-nav"))
        .args(args)
        .current_dir(dir)
        .env_remove("TOPO_NAV_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_TRAINING: &str = r#""train": {"optimizer": {"epochs": 1}, "curriculum": {"samples": 120, "worlds": 2}}"#;

#[test]
fn unknown_experiment_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"experiment": "matching", "world": {"kind": "grid"}}"#).unwrap();
    let o = topo_nav(&["teleport", "--config", "c.json"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("teleport"), "{}", stderr(&o));

    fs::write(dir.path().join("d.json"), r#"{"experiment": "teleport", "world": {"kind": "grid"}}"#).unwrap();
    let o = topo_nav(&["matching", "--config", "d.json"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("teleport"), "{}", stderr(&o));
}

#[test]
fn invalid_config_lists_every_field_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"experiment": "matching", "world": {"kind": "grid", "block_size": -1}, "matching": {"routes": 0}}"#,
    )
    .unwrap();
    let o = topo_nav(&["matching", "--config", "c.json", "--out", "out"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("world.block_size") && err.contains("matching.routes"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_checkpoint_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"experiment": "drive", "world": {"kind": "four-way"}, "model": {"checkpoint": "nope.json"}}"#,
    )
    .unwrap();
    let o = topo_nav(&["drive", "--config", "c.json", "--out", "out"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing artifact nope.json"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn calibration_csv_has_one_monotone_row_per_z() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"{{"experiment": "calibration", "world": {{"kind": "grid", "extents": 240}},
            "calibration": {{"z_grid": [0.5, 1, 2, 3], "samples": 60}}, {SMALL_TRAINING}}}"#
    );
    fs::write(dir.path().join("c.json"), cfg).unwrap();
    let o = topo_nav(&["calibration", "--config", "c.json", "--out", "cal"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.path().join("cal/calibration.csv")).unwrap();
    let rows: Vec<(f64, f64)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [0.5, 1.0, 2.0, 3.0]);
    assert!(rows.windows(2).all(|w| w[0].1 <= w[1].1), "{rows:?}");
    let svg = fs::read_to_string(dir.path().join("cal/calibration.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("class=\"marker\""));
}

#[test]
fn seed_and_output_overrides_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"experiment": "matching", "world": {"kind": "grid", "extents": 400, "block_size": 80}, "matching": {"routes": 2}}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_topo-nav"))
        .args(["simulate", "--config", "c.json", "--seed", "42"])
        .current_dir(dir.path())
        .env("TOPO_NAV_OUT", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("from-env/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["command"], "simulate");
    assert!(manifest["files"]["trace.csv"].is_string());
    // no temporaries left behind
    for entry in fs::read_dir(dir.path().join("from-env")).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().into_owned();
        assert!(!name.starts_with('.'), "{name}");
    }
}

#[test]
fn matching_run_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"experiment": "matching", "world": {"kind": "grid", "extents": 400, "block_size": 80}, "matching": {"routes": 3}}"#,
    )
    .unwrap();
    for out in ["a", "b"] {
        let o = topo_nav(&["matching", "--config", "c.json", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["matched.json", "accuracy.csv", "metrics.json", "accuracy.svg"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}
