use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "synthetic_size = 500
square_x = 180
square_y = 180
square_side = 110
frame_width = 96
frame_height = 96
";

fn brm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("brm runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = brm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<_> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

#[test]
fn stepwise_pipeline() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "small.cfg"];
    ok(d, &[&c[..], &["synth-map", "--out", "city.geojson"]].concat());
    let r = ok(d, &[&c[..], &["rasterize", "--polygons", "city.geojson", "--out", "city.pgm"]].concat());
    let r: serde_json::Value = serde_json::from_str(&r).unwrap();
    assert!(r["building_fraction"].as_f64().unwrap() > 0.0);
    assert!(d.join("city.geo").exists());

    ok(d, &[&c[..], &["ratio-map", "--raster", "city.pgm", "--out", "city.brm"]].concat());
    ok(d, &[&c[..], &["simulate", "--raster", "city.pgm", "--out", "flight"]].concat());
    assert!(d.join("flight/poses.csv").exists());
    assert!(d.join("flight/frames/frame_0.pgm").exists());

    let s = ok(
        d,
        &[&c[..], &["localize", "--map", "city.brm", "--flight", "flight", "--out", "out"]].concat(),
    );
    let s: serde_json::Value = serde_json::from_str(&s).unwrap();
    let frames = s["frames"].as_u64().unwrap() as usize;
    assert!(frames > 10);

    let traj = fs::read_to_string(d.join("out/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "t,truth_x,truth_y,est_x,est_y,phase");
    assert_eq!(traj.lines().count(), frames + 1);
    for i in 0..frames {
        assert!(d.join(format!("out/candidates_{i}.csv")).exists());
        assert!(d.join(format!("out/heatmap_{i}.png")).exists());
    }

    let e = ok(d, &["evaluate", "--report", "out/report.json"]);
    let e: serde_json::Value = serde_json::from_str(&e).unwrap();
    assert_eq!(e["rmse_whole_path"], s["rmse_whole_path"]);

    ok(
        d,
        &["plot", "--map", "city.brm", "--candidates", "out/candidates_0.csv", "--out", "p.png"],
    );
    assert_eq!(fs::read(d.join("p.png")).unwrap(), fs::read(d.join("out/heatmap_0.png")).unwrap());
}

#[test]
fn run_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "small.cfg", "run", "--out", "a"]);
    ok(d, &["--config", "small.cfg", "--set", "seed=1", "run", "--out", "b"]);
    for f in ["report.json", "trajectory.csv", "candidates_3.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    ok(d, &["--config", "small.cfg", "--set", "seed=2", "run", "--out", "c"]);
    assert_ne!(
        fs::read(d.join("a/report.json")).unwrap(),
        fs::read(d.join("c/report.json")).unwrap()
    );
}

#[test]
fn overrides_reach_the_report() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "small.cfg", "--set", "e1=0.25", "--set", "k_cap=777", "run", "--out", "o"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("o/report.json")).unwrap()).unwrap();
    assert_eq!(report["settings"]["matcher"]["e1"], 0.25);
    assert_eq!(report["settings"]["matcher"]["k_cap"], 777);
}

#[test]
fn failures_emit_one_json_line() {
    let dir = setup();
    let d = dir.path();

    let out = brm(d, &["ratio-map", "--raster", "missing.pgm", "--out", "x.brm"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "geo");

    let out = brm(d, &["--set", "bogus=1", "config"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("bogus"));

    let out = brm(d, &["--set", "e1=-1", "config"]);
    assert_eq!(out.status.code(), Some(1));

    let out = brm(d, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");

    let out = brm(d, &["--config", "small.cfg", "--set", "square_x=5", "run", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["error"]["kind"], "sim");
    assert_eq!(e["error"]["frame"], 0);

    let out = brm(d, &["--config", "small.cfg", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "config");
}

#[test]
fn evaluate_rejects_tampered_report() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "small.cfg", "run", "--out", "o"]);
    let path = d.join("o/report.json");
    let mut report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let v = report["rmse_whole_path"].as_f64().unwrap();
    report["rmse_whole_path"] = (v + 1.0).into();
    fs::write(&path, report.to_string()).unwrap();
    let out = brm(d, &["evaluate", "--report", "o/report.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "parse");
}

#[test]
fn config_lists_every_key() {
    let dir = setup();
    let text = ok(dir.path(), &["--config", "small.cfg", "config"]);
    assert!(text.contains("square_side = 110"));
    assert!(text.contains("e1 = 0.3"));
    assert!(text.contains("epsilon = 25"));
    assert!(text.contains("d_max = 75"));
}
