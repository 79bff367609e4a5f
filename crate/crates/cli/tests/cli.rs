use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bcpt_core::eval::validate_report;
use bcpt_core::synth::read_fold;
use bcpt_core::trainer::{Checkpoint, TrainState};

fn bcpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcpt")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small fold in `dir/fold`; returns the fold file.
fn small_fold(dir: &Path, n_base: usize, n_novel: usize) -> PathBuf {
    let out = dir.join("fold");
    let nb = n_base.to_string();
    let nn = n_novel.to_string();
    let o = bcpt(&[
        "gen-data", "--seed", "7", "--n-base", &nb, "--n-novel", &nn, "--height", "12", "--width", "12", "--n-train", "4",
        "--n-eval", "3", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("fold.bin")
}

const QUICK: [&str; 6] = ["--hidden-dim", "8", "--embed-dim", "6", "--batch-pixels", "64"];

fn pretrain(fold: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--fold", p(fold), "--out", p(out), "--k", "3"];
    args.extend(QUICK);
    if !extra.contains(&"--epochs") {
        args.extend(["--epochs", "2"]);
    }
    args.extend(extra);
    bcpt(&args)
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = vec![];
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = bcpt(&["gen-data", "--seed", "7", "--n-base", "3", "--n-novel", "2", "--out", p(&out)]);
        assert_eq!(code(&o), 0);
        files.push(std::fs::read(out.join("fold.bin")).unwrap());
        let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("gen-data.manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["seed"], 7);
        assert_eq!(manifest["outputs"][0], p(&out.join("fold.bin")));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn no_novel_classes_means_training_labels_are_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    let fold = read_fold(&small_fold(dir.path(), 3, 0)).unwrap();
    assert!(fold.novel_class_ids.is_empty());
    for s in fold.train_scenes.iter().chain(&fold.eval_scenes) {
        assert!(s.hidden_novel().iter().all(Option::is_none));
    }
}

#[test]
fn exit_code_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let fold = small_fold(dir.path(), 3, 2);
    let out = dir.path().join("x");
    let missing = dir.path().join("missing.bin");
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["gen-data", "--seed", "1"], 2),
        (vec!["no-such-command"], 2),
        (vec!["pretrain", "--fold", p(&missing), "--out", p(&out)], 2),
        (vec!["pretrain", "--fold", p(&fold), "--out", p(&out), "--scheme", "nope"], 2),
        (vec!["pretrain", "--fold", p(&fold), "--out", p(&out), "--mu", "1.5"], 2),
        // guidance with K=6 needs five base classes
        (vec!["pretrain", "--fold", p(&fold), "--out", p(&out), "--k", "6"], 2),
        (vec!["pretrain", "--fold", p(&fold), "--out", p(&out), "--k", "3", "--lr", "1e150", "--epochs", "3"], 3),
        (vec!["eval", "--fold", p(&fold), "--checkpoint", p(&missing), "--out", p(&out)], 2),
        (vec!["compare", "--fold", p(&fold), "--out", p(&out)], 2),
        (vec!["gen-data", "--out", "/proc/forbidden/fold"], 4),
        (vec!["pretrain", "--fold", p(&fold), "--config", p(&missing), "--out", p(&out)], 2),
    ];
    for (args, want) in cases {
        let o = bcpt(&args);
        assert_eq!(code(&o), want, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    // corrupt fold file
    std::fs::write(dir.path().join("bad.bin"), b"BCPTFOLD garbage").unwrap();
    let o = bcpt(&["pretrain", "--fold", p(&dir.path().join("bad.bin")), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn zero_epochs_writes_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let fold_path = small_fold(dir.path(), 3, 2);
    let out = dir.path().join("init");
    let o = pretrain(&fold_path, &out, &["--epochs", "0", "--seed", "5"]);
    assert_eq!(code(&o), 0);
    let ckpt = Checkpoint::read(&out.join("checkpoint.bin")).unwrap();
    let fold = read_fold(&fold_path).unwrap();
    let init = TrainState::init(&ckpt.config, fold.config.feature_dim, fold.base_class_ids.len()).unwrap();
    assert_eq!(ckpt.state, init);
    assert_eq!(ckpt.config.seed, 5);
    assert!(std::fs::read_to_string(out.join("train_log.jsonl")).unwrap().is_empty());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let fold = small_fold(dir.path(), 3, 2);
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"train": {"alpha": 0.3, "mu": 0.99, "k": 2}}"#).unwrap();
    let out = dir.path().join("o");
    let o = pretrain(&fold, &out, &["--config", p(&cfg), "--no-ocg", "--mapping", "injective"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = Checkpoint::read(&out.join("checkpoint.bin")).unwrap().config;
    assert_eq!((c.alpha, c.mu, c.k), (0.3, 0.99, 3));
    assert!(c.bmc_enabled && !c.ocg_enabled);
    assert_eq!(c.mapping, "injective");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("pretrain.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["alpha"], 0.3);
    assert_eq!(manifest["config"]["scene"]["height"], 12);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);

    std::fs::write(&cfg, r#"{"train": {"unknown_field": 1}}"#).unwrap();
    assert_eq!(code(&pretrain(&fold, &out, &["--config", p(&cfg)])), 2);
}

#[test]
fn comparing_a_checkpoint_with_itself_gives_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let fold = small_fold(dir.path(), 3, 2);
    let a = dir.path().join("a");
    assert_eq!(code(&pretrain(&fold, &a, &[])), 0);
    let ck = a.join("checkpoint.bin");
    let both = format!("{},{}", p(&ck), p(&ck));
    let out = dir.path().join("cmp");
    let o = bcpt(&["compare", "--fold", p(&fold), "--checkpoints", &both, "--labels", "x,y", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = validate_report(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.columns.len(), 2);
    assert_eq!(report.columns[0].per_seed, report.columns[1].per_seed);
    let d = &report.columns[1].delta;
    assert_eq!([d.mean_iou, d.fb_iou, d.nmi, d.purity], [0.0; 4]);
    // label count must match
    let o = bcpt(&["compare", "--fold", p(&fold), "--checkpoints", &both, "--labels", "x", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_writes_a_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let fold = small_fold(dir.path(), 3, 2);
    let a = dir.path().join("a");
    assert_eq!(code(&pretrain(&fold, &a, &["--scheme", "standard"])), 0);
    let out = dir.path().join("ev");
    let o = bcpt(&["eval", "--fold", p(&fold), "--checkpoint", p(&a.join("checkpoint.bin")), "--tau", "0.6", "--seed", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = validate_report(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config.tau, 0.6);
    assert_eq!(report.config.eval_seeds, vec![3, 4, 5, 6, 7]);
    assert_eq!(report.columns[0].scheme, "standard");
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 + 1);
}

#[test]
fn sweep_rejects_infeasible_k_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let fold = small_fold(dir.path(), 3, 2);
    let out = dir.path().join("sw");
    let mut args = vec!["compare", "--fold", p(&fold), "--sweep-k", "2,3,6", "--epochs", "1", "--out", p(&out)];
    args.extend(QUICK);
    assert_eq!(code(&bcpt(&args)), 2);
    assert!(!out.join("checkpoint_k2.bin").exists());
}
