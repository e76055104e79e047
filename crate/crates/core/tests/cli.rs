use std::path::Path;
use std::process::{Command, Output};

use rdk::tensor::{read_tensor, write_tensor};
use rdk::Grid;

fn rdk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdk"))
        .args(args)
        .env("RDK_THREADS", "1")
        .output()
        .expect("spawn rdk")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn depth_file(dir: &Path, name: &str, f: impl FnMut(usize, usize) -> f32) -> std::path::PathBuf {
    let path = dir.join(name);
    write_tensor(&Grid::from_fn2(6, 8, f).unwrap(), &path).unwrap();
    path
}

#[test]
fn hist_prints_json_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let d = depth_file(dir.path(), "d.rdt", |y, x| 5.0 + (y * 8 + x) as f32);
    let out = rdk(&["hist", "--depth", p(&d)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let probs = v["probs"].as_array().unwrap();
    assert_eq!(probs.len(), 100);
    let mass: f64 = probs.iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((mass - 1.0).abs() < 1e-6);
    assert_eq!(v["spec"]["bandwidth"].as_f64(), Some(0.03825));
}

#[test]
fn klloss_rejects_mismatched_specs() {
    let dir = tempfile::tempdir().unwrap();
    let d = depth_file(dir.path(), "d.rdt", |y, x| 10.0 + (y + x) as f32);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    assert!(rdk(&["hist", "--depth", p(&d), "--out", p(&a)]).status.success());
    assert!(rdk(&["hist", "--depth", p(&d), "--bins", "50", "--out", p(&b)]).status.success());

    let same = rdk(&["klloss", "--adv", p(&a), "--day", p(&a)]);
    assert_eq!(same.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&same.stdout).unwrap();
    assert!(v["kl"].as_f64().unwrap().abs() < 1e-12);

    let bad = rdk(&["klloss", "--adv", p(&a), "--day", p(&b)]);
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("bins 100 vs 50"), "{err}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(rdk(&["hist", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(rdk(&["frobnicate"]).status.code(), Some(2));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_rdk"))
        .args(["selfcheck"])
        .env("RDK_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));
    assert_eq!(rdk(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let out = rdk(&["hist", "--depth", "/nonexistent/d.rdt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metrics_writes_csv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let gt = depth_file(dir.path(), "gt.rdt", |y, x| 2.0 + (y * 8 + x) as f32 / 8.0);
    let pred = dir.path().join("pred.rdt");
    write_tensor(&read_tensor(&gt).unwrap().map(|g| g * 1.25), &pred).unwrap();
    let csv = dir.path().join("m.csv");
    let out = rdk(&["metrics", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["file", "abs_rel", "sq_rel", "rmse", "delta1", "n_valid"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.last().unwrap().get(0), Some("mean"));
    let abs_rel: f64 = rows[0][1].parse().unwrap();
    let delta1: f64 = rows[0][4].parse().unwrap();
    assert!((abs_rel - 0.25).abs() < 1e-12);
    assert_eq!(delta1, 0.0);
    assert_eq!(&rows[0][5], "48");
}

#[test]
fn oracle_and_costvol_are_reproducible() {
    let run = |dir: &Path| {
        let o = dir.join("scene");
        assert!(rdk(&["oracle", "gen", "--out-dir", p(&o)]).status.success());
        let cv = dir.join("cv.rdt");
        let best = dir.join("best.rdt");
        let out = rdk(&[
            "costvol",
            "--feat-t",
            p(&o.join("feat_t.rdt")),
            "--feat-prev",
            p(&o.join("feat_prev.rdt")),
            "--camera",
            p(&o.join("camera.json")),
            "--mode",
            "dot",
            "--out",
            p(&cv),
            "--best-depth",
            p(&best),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        [
            std::fs::read(o.join("feat_prev.rdt")).unwrap(),
            std::fs::read(o.join("manifest.json")).unwrap(),
            std::fs::read(&cv).unwrap(),
            std::fs::read(dir.join("cv.json")).unwrap(),
            std::fs::read(&best).unwrap(),
        ]
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn consistency_writes_confidence_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let d = depth_file(dir.path(), "d.rdt", |y, x| 3.0 + (y + x) as f32);
    let c = dir.path().join("c.rdt");
    let pgm = dir.path().join("c.pgm");
    let out = rdk(&["consistency", "--syn", p(&d), "--day", p(&d), "--out", p(&c), "--pgm", p(&pgm)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read_tensor(&c).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
}

#[test]
fn losses_real_stage_with_unit_terms() {
    let out = rdk(&[
        "losses",
        "--stage",
        "real",
        "--depth-term",
        "1",
        "--dis-term",
        "1",
        "--cv-term",
        "1",
        "--pose-term",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total"].as_f64(), Some(3.01));
}
