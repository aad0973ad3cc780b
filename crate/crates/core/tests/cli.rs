use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "flow": {"frames": 6, "steps": 2},
  "epochs": 1,
  "batch_size": 16,
  "noise_scales": [0.0, 0.05],
  "contamination_fractions": [0.0, 0.1],
  "zero_train": {"trials": 2},
  "benchmark": {
    "train_tracks": 6, "train_frames": 10,
    "test_normal_videos": 2, "test_anomalous_videos": 2, "test_frames": 10,
    "pool_tracks": 2, "pool_frames": 8
  }
}"#;

fn daflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daflow"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = daflow(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn params_prints_breakdown_and_total() {
    let out = ok(&["params"]);
    assert!(out.starts_with("step\tlayer\tcount\n"));
    assert!(out.contains("0\tdam\t44"));
    assert!(out.trim_end().ends_with("total\t\t512"));
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json");
    let out = ok(&["params", "--config", shipped.to_str().unwrap()]);
    assert!(out.trim_end().ends_with("total\t\t512"));
}

#[test]
fn errors_are_one_tab_separated_line() {
    let out = daflow(&[
        "eval",
        "--data",
        "/nonexistent/manifest.json",
        "--out",
        "/tmp",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(
        err.starts_with("error\tinvalid\tinvalid argument: missing --checkpoint"),
        "{err}"
    );

    let out = daflow(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error\tusage\t"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"epoch": 3}"#).unwrap();
    let out = daflow(&["params", "--config", bad.to_str().unwrap()]);
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error\tjson\t"));
}

#[test]
fn full_pipeline_on_tiny_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let out = ok(&["synth", "--config", cfg, "--out", data.to_str().unwrap()]);
    assert!(out.contains("test_frames\t40"));
    for f in [
        "manifest.json",
        "train.jsonl",
        "test.jsonl",
        "pool.jsonl",
        "labels.csv",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }
    let manifest = data.join("manifest.json");
    let m = manifest.to_str().unwrap();
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    ok(&[
        "train", "--config", cfg, "--data", m, "--out", r, "--epochs", "2", "--lr", "1e-3",
    ]);
    assert_eq!(
        header(&run.join("loss.csv")),
        "epoch,mean_nll,rejected_steps"
    );
    let ckpt = run.join("checkpoint.json");
    let c = ckpt.to_str().unwrap();

    ok(&[
        "score",
        "--config",
        cfg,
        "--data",
        m,
        "--checkpoint",
        c,
        "--out",
        r,
    ]);
    assert_eq!(
        header(&run.join("segment_scores.csv")),
        "video,person,first_frame,frames,log_prob"
    );
    assert_eq!(
        header(&run.join("frame_scores.csv")),
        "video,frame,score,label"
    );

    let out = ok(&[
        "eval",
        "--config",
        cfg,
        "--data",
        m,
        "--checkpoint",
        c,
        "--out",
        r,
    ]);
    let auc: f64 = out
        .trim()
        .strip_prefix("micro_auc\t")
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(header(&run.join("roc.csv")), "fpr,tpr,threshold");

    let out = ok(&[
        "noise",
        "--config",
        cfg,
        "--data",
        m,
        "--checkpoint",
        c,
        "--out",
        r,
        "--scales",
        "0,0.1",
    ]);
    assert_eq!(out.lines().count(), 2);
    assert_eq!(out.lines().next().unwrap(), format!("noise\t0\t{auc}"));
    assert_eq!(header(&run.join("noise.csv")), "scale,auc");

    ok(&[
        "contaminate",
        "--config",
        cfg,
        "--data",
        m,
        "--out",
        r,
        "--fractions",
        "0.1",
    ]);
    assert_eq!(
        header(&run.join("contamination.csv")),
        "fraction,replaced,auc"
    );

    let out = ok(&[
        "zero-train",
        "--config",
        cfg,
        "--data",
        m,
        "--out",
        r,
        "--trials",
        "3",
        "--parallel",
    ]);
    assert!(out.starts_with("zero_train_mean_auc\t"));
    let rows = std::fs::read_to_string(run.join("zero_train.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
}
