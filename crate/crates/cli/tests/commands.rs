use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rresm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rresm")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    fs::write(
        &p,
        "model.max_disparity=64\nmodel.channels=16\nmodel.groups=8\n\
         train.crop_height=64\ntrain.crop_width=128\ntrain.eval_every=2\n",
    )
    .unwrap();
    p.display().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&rresm(&["--help"])), 0);
    assert_eq!(code(&rresm(&[])), 1);
    assert_eq!(code(&rresm(&["frobnicate"])), 1);
    assert_eq!(code(&rresm(&["infer", "--left", "a.png"])), 1);
    assert_eq!(code(&rresm(&["bench", "--iters", "2"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "mca.poolin=mean\n").unwrap();
    let o = rresm(&["bench", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = rresm(&["infer", "--left", "/nonexistent/l.png", "--right", "/nonexistent/r.png", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&rresm(&["bench", "--checkpoint", junk.to_str().unwrap(), "--iters", "10"])), 2);
}

#[test]
fn selftest_passes_and_detects_corruption() {
    let ok = rresm(&["selftest"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("0 failed"));
    let bad = rresm(&["selftest", "--corrupt-haar"]);
    assert_eq!(code(&bad), 3);
    assert!(stdout(&bad).lines().any(|l| l.starts_with("FAIL") && l.contains("haar")));
}

#[test]
fn generate_train_eval_infer_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("rds");
    let run = dir.path().join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());

    let g = rresm(&["gen-rds", "--config", &cfg, "--out", data_s, "--count", "2", "--height", "64", "--width", "128"]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    let manifest = data.join("manifest.txt");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 2);

    let t = rresm(&["train-toy", "--config", &cfg, "--manifest", manifest.to_str().unwrap(), "--out", run_s, "--iters", "3"]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    assert_eq!(stdout(&t).lines().filter(|l| l.starts_with("step ")).count(), 3);
    let ckpt = run.join("model.ckpt");
    for f in ["model.ckpt", "model.ckpt.cfg", "loss_curve.txt", "run.cfg"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let ck = ckpt.to_str().unwrap();

    // model config comes from the sidecar
    let e = rresm(&["eval", "--manifest", manifest.to_str().unwrap(), "--checkpoint", ck, "--out", run_s]);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    let lines: Vec<String> = fs::read_to_string(run.join("eval.jsonl")).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    for key in ["\"sample\"", "\"mae_px\"", "\"mae_mm\"", "\"bad1\"", "\"bad2\"", "\"bad3\"", "\"d1\"", "\"n_valid\""] {
        assert!(lines[2].contains(key), "{key} missing from {}", lines[2]);
    }
    assert!(lines[2].contains("\"aggregate\""));

    let calib = dir.path().join("calib.txt");
    fs::write(&calib, "focal_px=500\nbaseline_mm=5\n").unwrap();
    let out = dir.path().join("pred");
    let i = rresm(&[
        "infer",
        "--left",
        data.join("left_000.png").to_str().unwrap(),
        "--right",
        data.join("right_000.png").to_str().unwrap(),
        "--gt",
        data.join("disp_000.pfm").to_str().unwrap(),
        "--calib",
        calib.to_str().unwrap(),
        "--checkpoint",
        ck,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&i), 0, "{}", String::from_utf8_lossy(&i.stderr));
    for f in ["disparity.pfm", "depth.pfm", "error_map.png", "report.jsonl"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = fs::read_to_string(out.join("report.jsonl")).unwrap();
    assert!(!report.contains("\"mae_mm\":null"), "{report}");

    let b = rresm(&["bench", "--checkpoint", ck, "--height", "64", "--width", "128", "--iters", "10"]);
    assert_eq!(code(&b), 0, "{}", String::from_utf8_lossy(&b.stderr));
    let text = stdout(&b);
    let field = |k: &str| text.lines().find_map(|l| l.strip_prefix(k)).map(|v| v.trim().to_string());
    assert_eq!(field("params:"), field("manifest_params:"));
    assert!(field("cv:").is_some());
}
