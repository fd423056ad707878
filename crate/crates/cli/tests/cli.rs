use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: [&str; 8] = [
    "--set",
    "n_train=8",
    "--set",
    "n_eval=4",
    "--set",
    "epochs=1",
    "--set",
    "batch_size=8",
];

fn fginet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fginet"))
        .args(args)
        .env_remove("FGINET_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fginet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn synth(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&["synth", "--out", d, "--n-train", "12", "--n-eval", "6", "--seed", "3"]);
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    synth(&b);
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    let m: Value = serde_json::from_slice(&ma).unwrap();
    // 12 + 12 train, 6 reals and 6 fakes of each of two families.
    assert_eq!(m["files"].as_array().unwrap().len(), 24 + 18);
    assert!(a.join("config.json").exists());
}

#[test]
fn unknown_family_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fginet(&["synth", "--out", tmp.path().to_str().unwrap(), "--families", "A,Z"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fginet(&["eval", "--ckpt", "no-such.bin", "--data", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such.bin"));
}

#[test]
fn unknown_override_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fginet(&["train", "--set", "no_such_key=1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_and_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend(["--set", "rho=0.4", "--set", "epochs=2", "--set", "batch_size=8"]);
    ok(&args);
    for f in ["ckpt-epoch1.bin", "ckpt-epoch2.bin", "metrics.json", "gates.csv", "timing.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let cfg = read_json(&run.join("config.json"));
    assert_eq!(cfg["model"]["rho"], 0.4);
    let metrics = read_json(&run.join("metrics.json"));
    assert!(metrics.get("wall_clock_secs").is_none());

    let ckpt = run.join("ckpt-epoch2.bin");
    let ev = tmp.path().join("ev");
    let stdout = ok(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.join("eval").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert!(stdout.contains("accuracy") && stdout.contains("AP"));
    let first = std::fs::read(ev.join("metrics.json")).unwrap();
    ok(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(ev.join("metrics.json")).unwrap());

    ok(&["gates", "--ckpt", ckpt.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    let depth = cfg["model"]["depth"].as_u64().unwrap() as usize;
    assert_eq!(lines(&ev.join("gates.csv")), 1 + depth);

    ok(&["logits", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    // 6 reals plus 6 fakes per family.
    assert_eq!(lines(&ev.join("logits.csv")), 1 + 18);
}

#[test]
fn env_seed_is_fallback() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--out", run.to_str().unwrap()];
    args.extend(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_fginet"))
        .args(&args)
        .env("FGINET_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&run.join("config.json"))["seed"], 7);
}

#[test]
fn config_file_with_dotted_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"data.n_train": 8, "data.n_eval": 4, "epochs": 1, "batch_size": 8, "model.rho": 0.2}"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--set", "rho=0.6", "--out", run.to_str().unwrap()]);
    let eff = read_json(&run.join("config.json"));
    // --set applies after the file.
    assert_eq!(eff["model"]["rho"], 0.6);
    assert_eq!(eff["data"]["n_train"], 8);
}

#[test]
fn sweep_has_one_row_per_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep-rho", "--out", tmp.path().to_str().unwrap()];
    args.extend(TINY);
    ok(&args);
    let csv = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let rhos: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rhos, ["0", "0.2", "0.4", "0.6", "0.8"]);
}

#[test]
fn ablation_rows_and_unknown_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["ablation", "--variants", "baseline,late-add", "--out", tmp.path().to_str().unwrap()];
    args.extend(TINY);
    ok(&args);
    assert_eq!(lines(&tmp.path().join("ablation.csv")), 3);
    let mut bad = vec!["ablation", "--variants", "bogus", "--out", tmp.path().to_str().unwrap()];
    bad.extend(TINY);
    assert_eq!(fginet(&bad).status.code(), Some(1));
}

#[test]
fn dwt_and_mask_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    ok(&["dwt", "--size", "16", "--out", d]);
    // Four bands of 3×8×8 coefficients.
    assert_eq!(lines(&tmp.path().join("bands.csv")), 1 + 4 * 3 * 64);
    ok(&["mask-demo", "--rho", "0.4", "--patch", "4", "--size", "16", "--out", d]);
    assert_eq!(lines(&tmp.path().join("mask.csv")), 1 + 3 * 16);
    assert_eq!(lines(&tmp.path().join("mask_pixels.csv")), 1 + 3 * 256);
}

#[test]
fn verify_all_suites_pass() {
    let stdout = ok(&["verify"]);
    assert_eq!(stdout.matches("[PASS]").count(), 5, "{stdout}");
}

#[test]
fn verify_single_suite() {
    let stdout = ok(&["verify", "--suite", "gradcheck"]);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.contains("gradcheck"));
}

#[test]
fn injected_haar_fault_fails_reconstruction() {
    let out = fginet(&["verify", "--suite", "wavelet", "--fault-haar-scale", "1.01"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[FAIL]") && stdout.contains("max reconstruction error"), "{stdout}");
}

#[test]
fn unknown_suite_is_usage_error() {
    assert_eq!(fginet(&["verify", "--suite", "nope"]).status.code(), Some(2));
}
