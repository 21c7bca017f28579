use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_coda");

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.json");
    let text = format!(
        r#"{{
  "seed": 1,
  "data": {{"kind": "synthetic", "spec": {{"family": "two-moons", "n_per_class": 40, "seed": 2}}}},
  "arch": {{"hidden": 6, "disc_hidden": 6}},
  "train": {{"iterations": 12, "batch_size": 8, "eval_every": 4, "dirtt_iterations": 3,
             "weights": {{"eps_vat_source": 0.3, "eps_vat_target": 0.3}}}}{extra}
}}"#
    );
    fs::write(&p, text).unwrap();
    p
}

fn coda(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CODA_OUT").output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn same_config_gives_byte_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&coda(&["train", "--config", s(&cfg), "--out", s(&a)]));
    ok(&coda(&["train", "--config", s(&cfg), "--out", s(&b)]));
    let ma = fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 4);
    assert_eq!(fs::read(a.join("checkpoint.coda")).unwrap(), fs::read(b.join("checkpoint.coda")).unwrap());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let a = tmp.path().join("a");
    ok(&coda(&["train", "--config", s(&cfg), "--out", s(&a), "--seed", "5", "--variant", "co-da-bn"]));
    let resolved = a.join("config.json");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("\"code_version\"") && text.contains("\"conditional-bn\""), "{text}");
    let b = tmp.path().join("b");
    ok(&coda(&["train", "--config", s(&resolved), "--out", s(&b)]));
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn untrained_model_is_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    // class means 4 apart under noise 200: labels are nearly independent of inputs
    let cfg = tmp.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"data": {"kind": "synthetic", "spec": {"family": "gaussian-blobs", "noise": 200.0, "n_per_class": 1000, "rotation_deg": 0}},
            "train": {"batch_size": 16}}"#,
    )
    .unwrap();
    let out = tmp.path().join("r");
    ok(&coda(&["train", "--config", s(&cfg), "--out", s(&out), "--iterations", "0"]));
    let o = coda(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    ok(&o);
    let line = String::from_utf8(o.stdout).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    let n = 2000.0;
    let sigma = (0.25f64 / n).sqrt();
    for key in ["acc_tgt_1", "acc_tgt_2"] {
        let acc = v[key].as_f64().unwrap();
        assert!((acc - 0.5).abs() <= 3.0 * sigma + 0.005, "{key} = {acc}");
    }
    assert_eq!(v["iter"], 0);
    assert!(out.join("eval.json").exists());
}

#[test]
fn degenerate_grid_matches_train() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#", "grid": {"lambda_p": [0.05], "nu": ["inf"]}"#);
    let g = tmp.path().join("g");
    ok(&coda(&["grid", "--config", s(&cfg), "--out", s(&g)]));
    let summary = fs::read_to_string(g.join("grid_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2, "{summary}");

    let plain = tmp.path().join("plain.json");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace(r#""weights": {"#, r#""weights": {"lambda_p": 0.05, "nu": "inf", "#)
        .replace(r#", "grid": {"lambda_p": [0.05], "nu": ["inf"]}"#, "");
    fs::write(&plain, text).unwrap();
    let t = tmp.path().join("t");
    ok(&coda(&["train", "--config", s(&plain), "--out", s(&t)]));
    assert_eq!(
        fs::read(g.join("cell-000/metrics.jsonl")).unwrap(),
        fs::read(t.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn exit_codes_are_distinct() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"iterations": "many"}}"#).unwrap();
    let out = tmp.path().join("o");
    assert_eq!(coda(&["train", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    let o = coda(&["train", "--variant", "co-dax", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("co-dax"));
    let o = coda(&["eval", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint.coda"));
    assert_eq!(coda(&["train", "--config", s(&tmp.path().join("missing.json"))]).status.code(), Some(3));
    assert_eq!(coda(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("r");
    ok(&coda(&["train", "--config", s(&cfg), "--out", s(&out), "--iterations", "1"]));
    let p = out.join("checkpoint.coda");
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] = b'Z';
    fs::write(&p, bytes).unwrap();
    let o = coda(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn env_sets_default_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let o = Command::new(BIN)
        .args(["train", "--config", s(&cfg), "--iterations", "1", "--variant", "vada-single"])
        .env("CODA_OUT", tmp.path().join("root"))
        .output()
        .unwrap();
    ok(&o);
    assert!(tmp.path().join("root/vada-single-seed1/metrics.jsonl").exists());
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("r");
    let base = ["--config", s(&cfg), "--out", s(&out)];
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend(base);
        args.extend(extra);
        let o = coda(&args);
        ok(&o);
        String::from_utf8(o.stdout).unwrap()
    };
    let gen = run("gen", &[]);
    assert_eq!(gen.lines().count(), 4);
    let src = fs::read_to_string(out.join("source.csv")).unwrap();
    assert_eq!(src.lines().next(), Some("x0,x1,label"));
    assert_eq!(src.lines().count(), 81);

    run("train", &[]);
    let probe = run("probe", &["--k", "1,3"]);
    assert!(probe.starts_with("k=1 ") && probe.contains("k=3 "), "{probe}");
    assert!(out.join("probe.json").exists() && out.join("knn.csv").exists());

    run("dirtt", &[]);
    let dm = fs::read_to_string(out.join("dirtt_metrics.jsonl")).unwrap();
    assert_eq!(dm.lines().count(), 2);
    run("eval", &["--checkpoint", s(&out.join("dirtt.coda"))]);

    let plots = run("plot", &[]);
    assert!(plots.contains("accuracy.svg") && plots.contains("curves.csv"));
    let svg = fs::read_to_string(out.join("accuracy.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn empty_metrics_plot_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("m.jsonl");
    fs::write(&m, "").unwrap();
    let o = coda(&["plot", s(&m)]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(!tmp.path().join("accuracy.svg").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["two-moons.json", "clusters.json"] {
        let c = coda::config::RunConfig::from_file(&dir.join(name)).unwrap();
        c.resolve(&Default::default()).unwrap().validate().unwrap();
    }
}
