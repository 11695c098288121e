use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ecfm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecfm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("cfg.json"), r#"{"samples": 120, "epochs": 1, "batch_size": 16}"#).unwrap();
    let o = ecfm(&["gen-data", "--config", "cfg.json"], root);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("data/train.json").exists() && root.join("data/test.json").exists());

    let o = ecfm(&["train", "-c", "cfg.json", "--out_dir=run", "--lr=0.002"], root);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch   1"));
    let metrics = fs::read_to_string(root.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let o = ecfm(&["eval", "--checkpoint", "run/checkpoint", "--config", "cfg.json", "--out_dir=eval"], root);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("rmse "));
    let preds = fs::read_to_string(root.join("eval/predictions.csv")).unwrap();
    assert!(preds.starts_with("id,y,y_hat,sigma\n"));

    let o = ecfm(&["dump-activations", "--checkpoint", "run/checkpoint", "--index", "1", "--out_dir=eval"], root);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // three maps per channel for stages of 8, 16 and 32 channels
    let dumped = fs::read_dir(root.join("eval/activations"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(dumped, 3 * (8 + 16 + 32));
}

#[test]
fn bad_input_exits_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = ecfm(&["train", "--no_such_key=1"], root);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let o = ecfm(&["eval", "--checkpoint", "missing"], root);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing") && err.contains("test.json"), "{err}");

    let o = ecfm(&["score", "--sigma", "0"], root);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn score_reports_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecfm(&["score", "--mu=-1", "--sigma", "0.25", "--z", "1", "--trials", "50"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("closed form") && text.contains("full") && text.contains("fast"));

    // one trial has no standard error, so the agreement check cannot pass
    let o = ecfm(&["score", "-m", "2", "--trials", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("closed form  0.233695"));
}

#[test]
fn grad_check_lists_every_item() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecfm(&["grad-check"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("37 ops, 5 graphs, 0 failed"), "{text}");
    assert_eq!(text.lines().filter(|l| l.ends_with(" ok")).count(), 42);
}
