use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionformer")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn init(dir: &Path, name: &str, flavor: &str, extra: &[&str]) -> String {
    let path = dir.join(name).to_str().unwrap().to_string();
    let mut args = vec![
        "init", "--flavor", flavor, "--blocks", "2", "--hidden", "32", "--heads", "4", "--decoder-blocks", "1",
        "--ffn-dim", "64", "--vocab", "30", "--feat-dim", "16", "--out", &path,
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

#[test]
fn lr_prints_the_schedule_value() {
    let o = run(&["lr", "--peak", "0.002", "--warmup", "25000", "--step", "25000"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "0.002");
    let o = run(&["lr", "--peak", "0.002", "--warmup", "25000", "--step", "100000"]);
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 0.001);
}

#[test]
fn exit_codes_separate_usage_from_domain_errors() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["lr", "--peak", "0.002"]).status.code(), Some(2));
    assert_eq!(run(&["profile", "--model", "x", "--decoding", "3rd-s-1-1"]).status.code(), Some(2));
    let o = run(&["lr", "--peak", "0.002", "--warmup", "0", "--step", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
    let o = run(&["bench", "--model", "/nonexistent/m.ffwt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fuse_then_verify_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(dir.path(), "ff.ffwt", "fusionformer", &["--bn-stats-seed", "3"]);
    let fused = dir.path().join("fused.ffwt");
    let report = dir.path().join("report.json");
    let o = run(&[
        "fuse", "--model", &model, "--out", fused.to_str().unwrap(), "--report", report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(json["max_residual"].as_f64().unwrap() < 1e-4);

    let o = run(&["verify", "--a", &model, "--b", fused.to_str().unwrap(), "--trials", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max_residual"));

    let ln = init(dir.path(), "ln.ffwt", "conformer_ln", &[]);
    let o = run(&["fuse", "--model", &ln, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("LayerNorm"));

    let o = run(&["verify", "--a", &model, "--b", &ln, "--trials", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn profile_accepts_named_decoding_setups() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(dir.path(), "ln.ffwt", "conformer_ln", &[]);
    for name in ["2nd-s-16-inf", "1st-s-16-4", "2nd-ns-∞-∞"] {
        let o = run(&[
            "profile", "--model", &model, "--frames", "200", "--decoding", name, "--repeats", "3", "--format", "json",
        ]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(v["categories"].as_array().unwrap().len(), 6);
    }
    let o = run(&["profile", "--model", &model, "--frames", "200", "--repeats", "3"]);
    assert!(stdout(&o).contains("normalization"));
}

#[test]
fn bench_quantize_and_ltp_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(dir.path(), "ff.ffwt", "fusionformer", &[]);
    let o = run(&["bench", "--model", &model, "--audio-seconds", "4", "--repeats", "1", "--mode", "int8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mode"], "int8");
    assert!(v["rtf"].as_f64().unwrap() > 0.0);

    let fused = dir.path().join("fused.ffwt");
    assert!(run(&["fuse", "--model", &model, "--out", fused.to_str().unwrap()]).status.success());
    let q = dir.path().join("q.ffwt");
    let o = run(&["quantize", "--model", fused.to_str().unwrap(), "--out", q.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let snaps = dir.path().join("snaps");
    std::fs::create_dir(&snaps).unwrap();
    for (i, scale) in ["1", "5"].iter().enumerate() {
        init(&snaps, &format!("{i:02}.ffwt"), "conformer_nonorm", &["--weight-scale", scale]);
    }
    let csv = dir.path().join("ltp.csv");
    let flags = dir.path().join("flags.json");
    let o = run(&[
        "ltp", "--snapshots", snaps.to_str().unwrap(), "--out", csv.to_str().unwrap(), "--flags",
        flags.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("snapshot_id,layer_path,mean,variance"));
    assert_eq!(text.lines().count(), 1 + 2 * 22);
    assert!(std::fs::read_to_string(&flags).is_ok());
}
