use std::path::Path;
use std::process::{Command, Output};

use evfuse_core::detector::{DetectorConfig, DetectorParams};
use evfuse_core::trainer::TrainLog;

fn evfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run evfuse")
}

fn ok(args: &[&str]) -> String {
    let o = evfuse(args);
    assert!(
        o.status.success(),
        "evfuse {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"
[scene]
duration_s = 1.0

[detector]
widths = [4, 4, 6, 6]
head_width = 4

[train]
batch_size = 1
seq_len = 4
tbptt_len = 2
max_lr = 1e-3
"#;

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn simulate_writes_the_dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seq");
    let stdout = ok(&["simulate", "--out", s(&out), "--duration", "1"]);
    assert!(stdout.contains("25 ticks"), "{stdout}");
    for f in ["events.evs", "gt.jsonl", "meta.json", "frames/000000.png", "frames/000024.png"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["simulate", "--out", s(&a), "--duration", "1", "--seed", "3"]);
    ok(&["simulate", "--out", s(&b), "--duration", "1", "--seed", "3"]);
    ok(&["simulate", "--out", s(&c), "--duration", "1", "--seed", "4"]);
    let read = |p: &Path| std::fs::read(p.join("events.evs")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn simulate_sparse_rgb_frame_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seq");
    ok(&["simulate", "--out", s(&out), "--duration", "1", "--rgb-divisor", "10"]);
    let frames = std::fs::read_dir(out.join("frames")).unwrap().count();
    assert_eq!(frames, 25usize.div_ceil(10));
}

#[test]
fn train_zero_iterations_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("seq");
    let run = dir.path().join("run");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--data", s(&data), "--iters", "0", "--seed", "5"]);
    let saved = DetectorParams::<f32>::load(&run.join("checkpoint.safetensors")).unwrap();
    let fresh = DetectorParams::<f32>::new(DetectorConfig {
        widths: [4, 4, 6, 6],
        head_width: 4,
        seed: 5,
        ..DetectorConfig::desk()
    })
    .unwrap();
    assert_eq!(saved.params.tensors(), fresh.params.tensors());
    assert!(run.join("config.toml").exists());
    assert!(TrainLog::read_csv(&run.join("train_log.csv")).unwrap().rows.is_empty());
}

#[test]
fn train_without_time_shift_logs_zero_shift() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("seq");
    let run = dir.path().join("run");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--data", s(&data), "--iters", "3", "--time-shift", "off"]);
    let log = TrainLog::read_csv(&run.join("train_log.csv")).unwrap();
    assert_eq!(log.rows.len(), 3);
    assert!(log.rows.iter().all(|r| r.dt_max == 0));
    let header = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(header.starts_with("iteration,lr,loss_total,loss_iou,loss_cls,loss_obj"));
}

#[test]
fn eval_protocols_with_stubs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("seq");
    ok(&["simulate", "--out", s(&data), "--duration", "1"]);

    let paired = dir.path().join("paired");
    ok(&["eval", "--out", s(&paired), "--data", s(&data), "--protocol", "paired", "--stub", "gt-echo"]);
    let csv = std::fs::read_to_string(paired.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "paired,paired,100.0000,100.0000,100.0000");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(paired.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["points"][0]["map"], 100.0);

    let sweep = dir.path().join("sweep");
    ok(&["eval", "--out", s(&sweep), "--data", s(&data), "--protocol", "rgb_mismatch", "--stub", "gt-echo"]);
    let points: Vec<String> = std::fs::read_to_string(sweep.join("sweep.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(points, ["N=1", "N=2", "N=4", "N=6", "N=8", "N=10"]);

    let ti = dir.path().join("ti");
    ok(&["eval", "--out", s(&ti), "--data", s(&data), "--protocol", "train_infer", "--stub", "empty"]);
    let rows: Vec<String> = std::fs::read_to_string(ti.join("sweep.csv")).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 1 + 5 * 2);
    assert!(rows.iter().any(|r| r.starts_with("train_infer,m=8 rgb=base/10,")));
    assert!(rows.iter().all(|r| r.ends_with(",0.0000,0.0000,0.0000")));
}

#[test]
fn eval_rejects_width_mismatch_with_shape_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("seq");
    let run = dir.path().join("run");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--data", s(&data), "--iters", "0"]);
    let wide = dir.path().join("wide.toml");
    std::fs::write(&wide, SMALL.replace("widths = [4, 4, 6, 6]", "widths = [4, 4, 8, 8]")).unwrap();
    let o = evfuse(&[
        "eval",
        "--config",
        s(&wide),
        "--out",
        s(&dir.path().join("ev")),
        "--data",
        s(&data),
        "--checkpoint",
        s(&run.join("checkpoint.safetensors")),
    ]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("shape mismatch"), "{err}");

    let ok_eval = dir.path().join("ok");
    ok(&["eval", "--config", s(&cfg), "--out", s(&ok_eval), "--data", s(&data), "--checkpoint", s(&run.join("checkpoint.safetensors"))]);
    assert!(ok_eval.join("report.json").exists());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[scene]\nduraton_s = 2.0\n").unwrap();
    let o = evfuse(&["simulate", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("duraton_s"));

    let o = evfuse(&["train", "--out", s(&dir.path().join("r")), "--data", s(&dir.path().join("missing"))]);
    assert!(!o.status.success());

    let corrupt = dir.path().join("corrupt");
    std::fs::create_dir_all(&corrupt).unwrap();
    std::fs::write(corrupt.join("meta.json"), "{").unwrap();
    let o = evfuse(&["eval", "--out", s(&dir.path().join("e")), "--data", s(&corrupt), "--stub", "gt-echo"]);
    assert!(!o.status.success());

    let o = evfuse(&["eval", "--out", s(&dir.path().join("e")), "--protocol", "tables"]);
    assert!(!o.status.success());
}
