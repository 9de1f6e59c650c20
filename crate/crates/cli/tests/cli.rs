use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use torq::io;
use torq::metrics::variance_spread;
use torq::BlockShape;

fn torq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_torq"))
        .args(args)
        .env_remove("TORQ_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) {
    let out = torq(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn small_synth(dir: &TempDir, name: &str, dist: &str, tokens: &str) -> PathBuf {
    let out = path(dir, name);
    ok(&["synth", "--output", s(&out), "--dist", dist, "--blocks", "8", "--lanes", "16", "--tokens", tokens, "--seed", "5"]);
    out
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (path(&dir, "a"), path(&dir, "b"), path(&dir, "c"));
    ok(&["synth", "--output", s(&a), "--seed", "9", "--dist", "laplace"]);
    ok(&["synth", "--output", s(&b), "--seed", "9", "--dist", "laplace"]);
    ok(&["synth", "--output", s(&c), "--seed", "10", "--dist", "laplace"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn gaussian_file_has_header_plus_f32_payload() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "g.torq");
    ok(&["synth", "--output", s(&out), "--dist", "gaussian", "--tokens", "128", "--blocks", "64", "--lanes", "32"]);
    let len = std::fs::metadata(&out).unwrap().len() as usize;
    assert_eq!(len, io::TENSOR_HEADER_LEN + 128 * 2048 * 4);
}

#[test]
fn default_outlier_mixture_has_imbalanced_blocks() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "o.torq");
    ok(&["synth", "--output", s(&out), "--dist", "outlier_mixture", "--p", "0.01", "--outlier-scale", "50", "--seed", "42"]);
    let data = io::read_tensor(&out)
        .unwrap()
        .into_blocks(BlockShape::new(64, 32).unwrap())
        .unwrap();
    let spread = variance_spread(&data).unwrap();
    assert!(spread.cv > 2.0, "cv {}", spread.cv);
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "run.cfg");
    std::fs::write(&cfg, "# shape\nblocks = 8\nlanes = 4\ntokens = 10\nseed = 3\n").unwrap();
    let out = path(&dir, "t.torq");
    ok(&["synth", "--output", s(&out), "--config", s(&cfg), "--blocks", "2", "--dist", "gaussian"]);
    let raw = io::read_tensor(&out).unwrap();
    assert_eq!((raw.rows, raw.cols), (10, 8));
}

#[test]
fn usage_and_input_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let missing = path(&dir, "missing.torq");
    let bundle = path(&dir, "b.torb");
    assert_eq!(code(&torq(&["calibrate", "--input", s(&missing), "--bundle", s(&bundle)])), 2);
    assert!(!bundle.exists());
    assert_eq!(code(&torq(&["synth", "--output", s(&path(&dir, "x")), "--dist", "cauchy"])), 2);
    assert_eq!(code(&torq(&["synth", "--output", s(&path(&dir, "x")), "--dist", "gaussian", "--p", "0.1"])), 2);
    assert_eq!(code(&torq(&["frobnicate"])), 2);

    let data = small_synth(&dir, "d.torq", "gaussian", "8");
    let shape_mismatch = torq(&["calibrate", "--input", s(&data), "--bundle", s(&bundle), "--blocks", "4", "--lanes", "16"]);
    assert_eq!(code(&shape_mismatch), 2);
    let bad_format = torq(&["calibrate", "--input", s(&data), "--bundle", s(&bundle), "--blocks", "8", "--lanes", "16", "--format", "fp8"]);
    assert_eq!(code(&bad_format), 2);

    let threads = Command::new(env!("CARGO_BIN_EXE_torq"))
        .args(["synth", "--output", s(&path(&dir, "y")), "--tokens", "2"])
        .env("TORQ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}

#[test]
fn calibration_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = small_synth(&dir, "d.torq", "lognormal", "32");
    let mut bundles = Vec::new();
    let mut reports = Vec::new();
    for run in 0..2 {
        let b = path(&dir, &format!("b{run}.torb"));
        let r = path(&dir, &format!("r{run}.json"));
        ok(&["calibrate", "--input", s(&data), "--bundle", s(&b), "--output", s(&r), "--blocks", "8", "--lanes", "16"]);
        bundles.push(std::fs::read(b).unwrap());
        reports.push(std::fs::read(r).unwrap());
    }
    assert_eq!(bundles[0], bundles[1]);
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn calibrate_then_quantize_lowers_error_on_heavy_tails() {
    let dir = TempDir::new().unwrap();
    let data = small_synth(&dir, "d.torq", "lognormal", "64");
    let bundle = path(&dir, "b.torb");
    let report = path(&dir, "q.json");
    let rebuilt = path(&dir, "q.torq");
    let prefix = path(&dir, "hist");
    ok(&["calibrate", "--input", s(&data), "--bundle", s(&bundle), "--blocks", "8", "--lanes", "16"]);
    ok(&["quantize", "--input", s(&data), "--bundle", s(&bundle), "--output", s(&rebuilt), "--report", s(&report), "--csv", s(&prefix)]);

    let r = json(&report);
    assert_eq!(r["schema"], "torq-report/1");
    let before = r["before"]["mse"].as_f64().unwrap();
    let after = r["after"]["mse"].as_f64().unwrap();
    assert!(after <= before, "after {after} before {before}");

    let original = io::read_tensor(&data).unwrap();
    let recon = io::read_tensor(&rebuilt).unwrap();
    assert_eq!((recon.rows, recon.cols, recon.dtype), (original.rows, original.cols, original.dtype));
    let mse = original
        .data
        .iter()
        .zip(&recon.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / original.data.len() as f64;
    assert!((mse - after).abs() <= 1e-5 * after, "file mse {mse}, report {after}");

    for side in ["before", "after"] {
        let csv = std::fs::read_to_string(format!("{}.{side}.csv", prefix.display())).unwrap();
        assert_eq!(csv.lines().next(), Some("bin_index,lower_bound,upper_bound,probability"));
        assert_eq!(csv.lines().count(), 9);
    }

    let out = torq(&["report", "--input", s(&report)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("before"));
}

#[test]
fn unconverged_calibration_is_flagged_and_still_written() {
    let dir = TempDir::new().unwrap();
    let data = small_synth(&dir, "d.torq", "lognormal", "32");
    let cfg = path(&dir, "tight.cfg");
    std::fs::write(&cfg, "inter.epsilon = 1e-300\ninter.max_sweeps = 8\nintra.max_iter = 1\n").unwrap();
    let bundle = path(&dir, "b.torb");
    let report = path(&dir, "r.json");
    let out = torq(&[
        "calibrate", "--input", s(&data), "--bundle", s(&bundle), "--output", s(&report), "--blocks", "8", "--lanes", "16",
        "--config", s(&cfg),
    ]);
    assert_eq!(code(&out), 3);
    assert!(!io::read_bundle(&bundle).unwrap().meta.converged);
    assert_eq!(json(&report)["converged"], false);
}

#[test]
fn compare_lists_four_arms_in_order() {
    let dir = TempDir::new().unwrap();
    let data = small_synth(&dir, "d.torq", "outlier_mixture", "64");
    let report = path(&dir, "c.json");
    ok(&["compare", "--input", s(&data), "--output", s(&report), "--blocks", "8", "--lanes", "16"]);
    let r = json(&report);
    let names: Vec<&str> = r["arms"].as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["rtn", "inter_only", "intra_only", "full"]);
    assert_eq!(r["calibration_tokens"], 32);
    assert_eq!(r["eval_tokens"], 32);
    assert_eq!(code(&torq(&["report", "--input", s(&report)])), 0);
}

#[test]
fn white_noise_arms_agree_within_five_percent() {
    let dir = TempDir::new().unwrap();
    let calib = path(&dir, "calib.torq");
    let eval = path(&dir, "eval.torq");
    ok(&["synth", "--output", s(&calib), "--dist", "gaussian", "--blocks", "16", "--lanes", "32", "--tokens", "128", "--seed", "1"]);
    ok(&["synth", "--output", s(&eval), "--dist", "gaussian", "--blocks", "16", "--lanes", "32", "--tokens", "128", "--seed", "2"]);
    let report = path(&dir, "c.json");
    ok(&["compare", "--input", s(&calib), "--eval", s(&eval), "--output", s(&report), "--blocks", "16", "--lanes", "32"]);
    let mses: Vec<f64> = json(&report)["arms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["stats"]["mse"].as_f64().unwrap())
        .collect();
    let lo = mses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mses.iter().copied().fold(0.0, f64::max);
    assert!(hi <= 1.05 * lo, "arm mse {mses:?}");
}
