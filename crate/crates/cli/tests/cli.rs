use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ilm_core::annotation_io::DatasetManifest;
use ilm_core::loop_orchestrator::{train_stage, EpochMetrics, LoopConfig, TrainConfig};
use ilm_core::losses::LossWeights;
use ilm_core::model::{predict_labels, LabeledImage, ModelParams};

fn ilm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilm"))
        .args(args)
        .env_remove("ILM_THREADS")
        .output()
        .expect("spawn ilm")
}

fn ok(args: &[&str]) -> String {
    let out = ilm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code plus the parsed single-line JSON error.
fn fails(args: &[&str]) -> (i32, serde_json::Value) {
    let out = ilm(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last = stderr.lines().last().unwrap_or_default();
    let json = serde_json::from_str(last).unwrap_or_else(|_| panic!("not a JSON error line: {stderr}"));
    (out.status.code().unwrap(), json)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join(format!("data{seed}"));
    ok(&[
        "synth", "--out", s(&data), "--seed", seed, "--n-source", "6", "--n-target", "12", "--n-eval", "5", "--height",
        "6", "--width", "6", "--classes", "4", "--feature-dim", "4",
    ]);
    data
}

fn read_trace(path: &Path) -> Vec<EpochMetrics> {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn supervised_flags_equal_plain_supervised_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "1");
    let mut init = LoopConfig::default().initial_params(4, 4);
    init.quantize_f32();
    let init_path = tmp.path().join("init.ilmw");
    init.save(&init_path).unwrap();

    let out = tmp.path().join("flags");
    ok(&[
        "train", "--seed", "4", "--labeled", s(&data.join("source.json")), "--unlabeled", s(&data.join("target.json")),
        "--classes", s(&data.join("classes.json")), "--init", s(&init_path), "--out", s(&out), "--epochs", "3",
        "--no-unsup", "--no-contrast",
    ]);
    let cli_trace = read_trace(&out.join("trace.json"));

    // The same stage run directly, with no unlabeled data at all.
    let m = DatasetManifest::load(&data.join("source.json")).unwrap();
    let images: Vec<_> = m
        .entries()
        .iter()
        .map(|e| (m.load_features(e).unwrap(), m.load_label(e).unwrap().unwrap()))
        .collect();
    let labeled: Vec<LabeledImage<'_>> = images.iter().map(|(x, y)| LabeledImage { features: x, labels: y }).collect();
    let cfg = TrainConfig {
        epochs: 3,
        weights: LossWeights::new(0.0, 0.0, 0.1).unwrap(),
        ..TrainConfig::default()
    };
    let mut student = init.clone();
    let (_, direct) = train_stage(&mut student, &labeled, &[], &cfg, 4).unwrap();

    assert_eq!(cli_trace.len(), 3);
    for (a, b) in cli_trace.iter().zip(&direct) {
        assert!((a.total - b.total).abs() <= 1e-6, "{a:?} vs {b:?}");
        assert!((a.supervised - b.supervised).abs() <= 1e-6);
        assert_eq!(a.unsupervised, 0.0);
        assert_eq!(a.contrastive, 0.0);
    }
    let mut saved = student;
    saved.quantize_f32();
    assert_eq!(ModelParams::load(&out.join("student.ilmw")).unwrap(), saved);
}

#[test]
fn outputs_are_never_overwritten_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "2");
    let source_before = std::fs::read(data.join("source.json")).unwrap();
    let (code, err) = fails(&["synth", "--out", s(&data), "--seed", "3"]);
    assert_eq!(code, 3);
    assert_eq!(err["error"], "io");
    assert_eq!(std::fs::read(data.join("source.json")).unwrap(), source_before);

    let (src, classes, out) = (data.join("source.json"), data.join("classes.json"), tmp.path().join("m"));
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--labeled", s(&src), "--classes", s(&classes), "--out", s(&out), "--epochs", "1"];
        args.extend_from_slice(extra);
        ilm(&args)
    };
    assert!(train(&[]).status.success());
    assert_eq!(train(&[]).status.code(), Some(3));
    assert!(train(&["--force"]).status.success());
    // Inputs are untouched.
    assert_eq!(std::fs::read(data.join("source.json")).unwrap(), source_before);
}

#[test]
fn errors_are_single_json_lines_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "3");

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[loop.train]\nepochz = 2\n").unwrap();
    let (code, err) = fails(&["--config", s(&cfg), "synth", "--out", s(&tmp.path().join("x"))]);
    assert_eq!((code, err["error"].as_str()), (2, Some("invalid_input")));

    let (code, _) = fails(&[
        "select", "--scores", s(&data.join("missing.tsv")), "--budget", "3", "--out", s(&tmp.path().join("sel")),
    ]);
    assert_eq!(code, 3);

    let scores = tmp.path().join("scores.tsv");
    std::fs::write(&scores, "a\t0.5\n").unwrap();
    let (code, err) = fails(&["select", "--scores", s(&scores), "--budget", "150%", "--out", s(&tmp.path().join("sel"))]);
    assert_eq!(code, 2);
    assert!(err["message"].as_str().unwrap().contains("outside [0, 1]"));

    let (code, _) = fails(&[
        "loop", "--target", s(&data.join("target.json")), "--classes", s(&data.join("classes.json")), "--source",
        s(&data.join("source.json")), "--out", s(&tmp.path().join("run")),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn score_select_ingest_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "4");
    let model = tmp.path().join("model");
    ok(&[
        "train", "--labeled", s(&data.join("source.json")), "--classes", s(&data.join("classes.json")), "--out",
        s(&model), "--epochs", "2", "--threads", "1",
    ]);
    let teacher = model.join("teacher.ilmw");
    let scores = tmp.path().join("scores.tsv");
    ok(&["score", "--checkpoint", s(&teacher), "--manifest", s(&data.join("target.json")), "--out", s(&scores)]);
    assert_eq!(std::fs::read_to_string(&scores).unwrap().lines().count(), 12);

    let sel = tmp.path().join("sel");
    let out = ok(&[
        "select", "--scores", s(&scores), "--budget", "25%", "--out", s(&sel), "--checkpoint", s(&teacher),
        "--manifest", s(&data.join("target.json")), "--classes", s(&data.join("classes.json")),
    ]);
    assert!(out.contains("selected 3 of 3"));
    let ids: Vec<String> = std::fs::read_to_string(sel.join("selected.txt")).unwrap().lines().map(String::from).collect();
    assert_eq!(ids.len(), 3);

    // Accept the exported predictions as the corrections.
    let ingested = tmp.path().join("labeled.json");
    ok(&[
        "ingest", "--manifest", s(&data.join("target.json")), "--corrected", s(&sel), "--classes",
        s(&data.join("classes.json")), "--out", s(&ingested),
    ]);
    let m = DatasetManifest::load(&ingested).unwrap();
    let params = ModelParams::load(&teacher).unwrap();
    let labeled: Vec<_> = m.entries().iter().filter(|e| e.label.is_some()).collect();
    assert_eq!(labeled.len(), 3);
    for e in labeled {
        assert!(ids.contains(&e.id));
        let pred = predict_labels(&params, &m.load_features(e).unwrap()).unwrap();
        assert_eq!(m.load_label(e).unwrap().unwrap(), pred);
    }

    let report = ok(&["eval", "--gt", s(&data.join("eval.json")), "--pred", s(&data.join("eval.json"))]);
    assert!(report.trim_end().ends_with("mIoU     1.0000"), "{report}");
    let json = tmp.path().join("eval.json");
    ok(&[
        "eval", "--gt", s(&data.join("eval.json")), "--checkpoint", s(&teacher), "--classes",
        s(&data.join("classes.json")), "--subset", "0,1", "--json", s(&json),
    ]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["per_class"].as_array().unwrap().len(), 2);
}

#[test]
fn loop_with_config_file_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "5");
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[loop]\nrounds = [2, \"25%\"]\nembed_dim = 4\n[loop.train]\nepochs = 2\n").unwrap();
    let run = tmp.path().join("run");
    let ann = tmp.path().join("corrections");
    let (src, tgt, ev, classes) = (
        data.join("source.json"),
        data.join("target.json"),
        data.join("eval.json"),
        data.join("classes.json"),
    );
    let base = [
        "--config", s(&cfg), "loop", "--source", s(&src), "--target", s(&tgt), "--eval", s(&ev), "--classes", s(&classes),
    ];
    let mut args = base.to_vec();
    args.extend_from_slice(&["--annotation-dir", s(&ann), "--annotation-timeout", "0", "--out", s(&run)]);
    let (code, err) = fails(&args);
    assert_eq!(code, 3);
    assert!(err["message"].as_str().unwrap().contains("annotation failed"));
    assert!(run.join("snapshot.json").is_file());

    // Finish from the stored ground truth instead.
    ok(&["loop", "--resume", s(&run), "--ground-truth", s(&data.join("target_gt.json"))]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["state"]["budget_spent"], 5);
    assert_eq!(report["state"]["ledger"].as_array().unwrap().len(), 2);
    assert!(ModelParams::load(&run.join("teacher.ilmw")).unwrap().embed_dim() == 4);
}
