use std::path::Path;
use std::process::{Command, Output};

fn mmground(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmground"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn fixture_train_eval_infer_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    let run = dir.path().join("run");
    let ev = dir.path().join("ev");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"batch_size": 4, "base_lr": 0.001}"#).unwrap();

    let o = mmground(&["gen-fixtures", "--n", "8", "--out", p(&fx)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fx.join("manifest.jsonl");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 8);

    let o = mmground(&[
        "train",
        "--config",
        p(&cfg),
        "--manifest",
        p(&manifest),
        "--steps",
        "3",
        "--out",
        p(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    assert!(loss.starts_with("step,lr,loss,"));
    let ckpt = run.join("checkpoint.bin");

    let o = mmground(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(ev.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert!(lines.next().unwrap().starts_with("auc,eer,acc,map,"));
    assert_eq!(lines.next().unwrap().split(',').count(), 16);
    let preds = std::fs::read_to_string(ev.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 8);
    let first: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    for key in ["id", "binary_score", "fg_scores", "box", "box_conf", "token_scores"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    // evaluation is reproducible
    let ev2 = dir.path().join("ev2");
    let o = mmground(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&ev2)]);
    assert!(o.status.success());
    assert_eq!(report, std::fs::read_to_string(ev2.join("report.csv")).unwrap());

    let o = mmground(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&fx.join("images/syn00000.ppm")),
        "--text",
        "w04 w05 swap1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["token_scores"].as_array().unwrap().len(), 3);

    let sal = dir.path().join("sal");
    let o = mmground(&[
        "saliency",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--id",
        "syn00001",
        "--out",
        p(&sal),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = std::fs::read(sal.join("syn00001.saliency.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.bin");
    let o = mmground(&["eval", "--checkpoint", p(&missing), "--manifest", "m.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: io: "), "{err}");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"base_lr": -1.0}"#).unwrap();
    let o = mmground(&["gen-fixtures", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: config: "));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = mmground(&["train", "--manifest", p(&empty), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: input: "));
}

#[test]
fn selftest_passes_and_detects_an_injected_fault() {
    let o = mmground(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("14/14 checks passed"));
    let o = mmground(&["selftest", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL grad"));
}
