use std::path::Path;
use std::process::{Command, Output};

fn splatrig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatrig")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("no stderr");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

#[test]
fn usage_errors_exit_2_with_a_json_line() {
    let out = splatrig(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");

    let out = splatrig(&["synth", "--out", "/tmp/x", "--size", "0x4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_their_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = splatrig(&["eval", "--ckpt", p(&dir.path().join("none")), "--data", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "load");
}

#[test]
fn help_exits_0() {
    assert!(splatrig(&["--help"]).status.success());
    assert!(splatrig(&["--version"]).status.success());
}

#[test]
fn synth_train_eval_render_reanimate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ck = dir.path().join("ck");

    let out = splatrig(&["synth", "--out", p(&data), "--size", "20x16"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());

    let out = splatrig(&["train", "--data", p(&data), "--out", p(&ck), "--prior", "none", "--iters", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("log line is JSON"))
        .collect();
    assert_eq!(log.first().unwrap()["iteration"], 1);
    assert_eq!(log.last().unwrap()["iteration"], 3);
    assert!(ck.join("manifest.json").exists() && ck.join("tensors.bin").exists());

    let report = dir.path().join("s2.json");
    let out = splatrig(&["eval", "--ckpt", p(&ck), "--data", p(&data), "--split", "setting2", "--out", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["prior_mode"], "none");
    assert_eq!(r["iteration"], 3);
    assert!(r["psnr"].as_f64().unwrap() > 0.0);
    assert!(r["lpips"].is_null());

    let png = dir.path().join("r.png");
    let out = splatrig(&["render", "--ckpt", p(&ck), "--out", p(&png), "--size", "10x8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (10, 8));

    let out = splatrig(&["render", "--ckpt", p(&ck), "--out", p(&png), "--exp", "[1.0]"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "argument");

    let drive = dir.path().join("drive.json");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ck.join("manifest.json")).unwrap()).unwrap();
    let e = manifest["expression_count"].as_u64().unwrap() as usize;
    let entries = serde_json::json!([
        { "exp": vec![0.0; e], "pose": [0.0, 0.0, 0.0, 0.0], "camera": 0 },
        { "exp": vec![0.5; e], "pose": [0.1, 0.0, 0.0, 0.2], "camera": 1 },
    ]);
    std::fs::write(&drive, entries.to_string()).unwrap();
    let frames = dir.path().join("frames");
    let out = splatrig(&["reanimate", "--ckpt", p(&ck), "--drive", p(&drive), "--out", p(&frames)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(frames.join("00000.png").exists() && frames.join("00001.png").exists());
}
