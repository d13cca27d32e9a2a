use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fun(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fun")).args(args).output().expect("fun binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fun(args);
    assert!(
        out.status.success(),
        "fun {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = fun(args);
    assert!(!out.status.success(), "fun {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn tiny_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow_on_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tiny_config();

    let msg = ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(msg.contains("8 train + 4 val"), "{msg}");
    assert!(data.join("manifest.json").exists());

    let y = tmp.path().join("y.funh");
    let msg = ok(&[
        "simulate", "--cube", s(&data.join("scene_0008.funh")), "--mask", s(&data.join("mask.funh")),
        "--sigma", "0.01", "--seed", "3", "--out", s(&y),
    ]);
    // 32 columns plus 3 columns of dispersion for 4 bands
    assert!(msg.contains("32x35"), "{msg}");

    let data_set = format!("data_dir={}", s(&data));
    let msg = ok(&["train", "--config", s(&cfg), "--out", s(&run), "--set", &data_set, "--set", "train.steps=20", "--set", "train.milestones=[10, 15]", "--set", "train.eval_every=10", "--set", "train.checkpoint_every=10"]);
    assert!(msg.contains("step     20"), "{msg}");
    for f in ["config.toml", "metrics.jsonl", "last.func", "checkpoints/step_000010.func", "samples/val0_step_000020.funh"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("steps = 20"), "{echoed}");

    // resume from the mid-run checkpoint and finish the remaining steps
    let msg = ok(&["train", "--out", s(&run), "--resume", s(&run.join("checkpoints/step_000010.func"))]);
    assert!(msg.contains("from step 10"), "{msg}");

    let ckpt = run.join("last.func");
    let msg = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    let json = msg.lines().last().unwrap();
    let row: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(row["kind"], "eval");
    assert_eq!(row["scenes"], 4);
    assert!(row["psnr"].as_f64().unwrap().is_finite());
    let msg = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "train"]);
    assert!(msg.lines().last().unwrap().contains("\"scenes\":8"));

    let recon = tmp.path().join("recon.funh");
    let msg = ok(&["reconstruct", "--ckpt", s(&ckpt), "--measurement", s(&y), "--out", s(&recon)]);
    assert!(msg.contains("32x32x4"), "{msg}");
    assert!(recon.exists());

    let dets = tmp.path().join("dets.txt");
    let overlay = tmp.path().join("overlay");
    ok(&["detect", "--ckpt", s(&ckpt), "--measurement", s(&y), "--out", s(&dets), "--overlay", s(&overlay)]);
    for line in fs::read_to_string(&dets).unwrap().lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 7, "{line}");
        assert_eq!(fields[0], "y");
    }
    let pngs = fs::read_dir(&overlay).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 4);
}

#[test]
fn bench_reports_linear_and_quadratic_growth() {
    let out = ok(&["bench", "--sizes", "16,32", "--channels", "8"]);
    let last: Vec<&str> = out.lines().last().unwrap().split('\t').collect();
    let fsm: f64 = last[4].parse().unwrap();
    let attn: f64 = last[5].parse().unwrap();
    assert!((fsm - 4.0).abs() < 0.4, "{out}");
    assert!((attn - 16.0).abs() < 1.6, "{out}");
    assert!(fails(&["bench", "--sizes", "0"]).contains("positive"));
}

#[test]
fn grad_check_runs_named_suites() {
    let out = ok(&["grad-check", "--module", "charbonnier"]);
    assert!(out.contains("ok"), "{out}");
    assert!(!out.contains("FAIL"));
    let err = fails(&["grad-check", "--module", "nonsense"]);
    assert!(err.contains("nonsense"), "{err}");
}

#[test]
fn bad_inputs_fail_with_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    let err = fails(&["train", "--config", s(&bad), "--out", s(&tmp.path().join("r"))]);
    assert!(err.contains("learning_rate"), "{err}");

    let err = fails(&["train", "--out", s(&tmp.path().join("r")), "--set", "train.lr"]);
    assert!(err.contains("key=value"), "{err}");

    let err = fails(&["train", "--out", s(&tmp.path().join("r")), "--set", &format!("data_dir={}", s(&tmp.path().join("none")))]);
    assert!(!err.is_empty());

    let junk = tmp.path().join("junk.funh");
    fs::write(&junk, b"not a cube").unwrap();
    let err = fails(&["simulate", "--cube", s(&junk), "--mask", s(&junk), "--out", s(&tmp.path().join("y"))]);
    assert!(err.contains("junk.funh"), "{err}");

    let err = fails(&["eval", "--ckpt", s(&junk)]);
    assert!(err.contains("junk.funh"), "{err}");
    assert!(fails(&["gen-data", "--out", s(&tmp.path().join("d")), "--scenes", "3", "--val", "4"]).contains("validation"));
}
