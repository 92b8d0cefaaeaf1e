use std::path::Path;
use std::process::{Command, Output};

const MICRO: &[&str] = &[
    "data.shape=8",
    "data.cases=6",
    "cnn.levels=4",
    "cnn.base_channels=2",
    "swin.patch=1",
    "swin.embed_dim=4",
    "swin.heads=1,1,2,2",
    "swin.window=2",
    "swin.mlp_ratio=2",
    "train.steps=3",
    "train.eval_every=0",
    "train.log_every=1",
];

fn cats(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cats"));
    cmd.args(args);
    match out_dir {
        Some(d) => cmd.env("CATS_OUTPUT_DIR", d),
        None => cmd.env_remove("CATS_OUTPUT_DIR"),
    };
    cmd.output().unwrap()
}

fn with_micro(cmd: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
    for kv in MICRO {
        v.push("--set".into());
        v.push(kv.to_string());
    }
    v
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn check_passes_and_fault_fails() {
    let ok = cats(&["check", "geometry"], None);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("PASS geometry/shift_mask_oracle"));

    let bad = cats(&["check", "geometry", "--inject-fault"], None);
    assert!(!bad.status.success());
    assert!(stdout(&bad).contains("FAIL geometry/shift_mask_oracle"));
    assert!(stderr(&bad).contains("cats: error kind=check"), "{}", stderr(&bad));
}

#[test]
fn usage_and_config_errors_are_machine_readable() {
    let o = cats(&["check", "everything"], None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cats: error kind=usage"), "{}", stderr(&o));

    let o = cats(&["frobnicate"], None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cats: error kind=usage"));

    let o = cats(&["train", "--set", "train.colour=red"], None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cats: error kind=config"), "{}", stderr(&o));

    let o = cats(&["predict", "--checkpoint", "/nonexistent.cv2c", "--input", "x", "--output", "y"], None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cats: error kind=io"));
}

#[test]
fn keys_lists_every_documented_key() {
    let o = cats(&["keys"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["model.mode", "swin.window", "data.split", "train.lr", "out_dir"] {
        assert!(text.lines().any(|l| l.starts_with(key)), "{key}");
    }
}

#[test]
fn generate_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let args = with_micro(&["generate", "--out", data.to_str().unwrap()]);
    let o = cats(&args.iter().map(String::as_str).collect::<Vec<_>>(), Some(dir.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("manifest.csv").exists());

    let run = dir.path().join("run");
    let mut args = with_micro(&["train"]);
    args.extend(["--set".into(), format!("data.dir={}", data.display())]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = cats(&argv, Some(&run));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("step     3"));
    for f in ["last.cv2c", "best.cv2c", "log.csv", "report_test.csv", "summary_test.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(run.join("summary_test.txt")).unwrap();
    assert_eq!(stdout(&o).lines().next(), summary.lines().next());

    let ck = run.join("best.cv2c");
    let mut args = with_micro(&["eval", "--checkpoint", ck.to_str().unwrap(), "--subset", "test"]);
    args.extend(["--set".into(), format!("data.dir={}", data.display())]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let eval_dir = dir.path().join("eval");
    let o = cats(&argv, Some(&eval_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(eval_dir.join("report_test.csv")).unwrap(),
        std::fs::read_to_string(run.join("report_test.csv")).unwrap()
    );

    let image = data.join("images").join("case_000.cv2v");
    let pred = dir.path().join("pred.cv2v");
    let o = cats(
        &["predict", "--checkpoint", ck.to_str().unwrap(), "--input", image.to_str().unwrap(), "--output", pred.to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = cats_core::data::read_volume::<u8>(&pred).unwrap();
    assert_eq!(labels.dims(), [8; 3]);
}
