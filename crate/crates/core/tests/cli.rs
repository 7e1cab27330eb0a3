use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "synth.docs_per_domain=40",
    "synth.train_queries=24",
    "synth.val_queries=8",
    "synth.test_queries=8",
    "synth.vocab_per_domain=60",
    "synth.topics_per_domain=6",
    "encoder.hidden_dim=16",
    "encoder.ffn_dim=32",
    "encoder.num_heads=2",
    "encoder.num_layers=1",
    "teacher.hidden_dim=16",
    "teacher.ffn_dim=32",
    "teacher.num_heads=2",
    "teacher.num_layers=1",
    "train.epochs=1",
    "adapter_train.epochs=1",
    "gate_train.epochs=1",
    "rerank_depth=20",
    "seeds=1",
];

fn drama(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drama")).args(args).output().unwrap()
}

fn tiny(out: &Path, command: &[&str]) -> Output {
    let mut args: Vec<String> = vec!["--out".into(), out.display().to_string()];
    for kv in TINY {
        args.push("--set".into());
        args.push((*kv).into());
    }
    args.extend(command.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    drama(&refs)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_succeeds() {
    let o = drama(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("run-all"));
}

#[test]
fn usage_errors_exit_3() {
    let o = drama(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));
    let o = drama(&["--set", "nonsense=1", "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
}

#[test]
fn evaluate_hand_example() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("a.run");
    let qrels = dir.path().join("q.qrels");
    fs::write(&run, "q1 Q0 a 1 3.0 x\nq1 Q0 z 2 2.0 x\nq1 Q0 b 3 1.0 x\n").unwrap();
    fs::write(&qrels, "q1 0 a 1\nq1 0 b 1\n").unwrap();
    let o = drama(&["evaluate", "--run", run.to_str().unwrap(), "--qrels", qrels.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let q1 = text.lines().find(|l| l.starts_with("q1\t")).unwrap();
    let f: Vec<&str> = q1.split('\t').collect();
    assert_eq!(f[1], "0.833333");
    assert_eq!(f[2], "1.000000");
    assert!(text.lines().any(|l| l.starts_with("all\t")));
}

#[test]
fn evaluate_missing_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.run");
    let o = drama(&["evaluate", "--run", missing.to_str().unwrap(), "--qrels", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[missing_artifact]"), "{}", stderr(&o));
}

#[test]
fn malformed_qrels_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("a.run");
    let qrels = dir.path().join("q.qrels");
    fs::write(&run, "q1 Q0 a 1 3.0 x\n").unwrap();
    fs::write(&qrels, "q1 0 a\n").unwrap();
    let o = drama(&["evaluate", "--run", run.to_str().unwrap(), "--qrels", qrels.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn energy_report_reference_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = drama(&["--out", dir.path().to_str().unwrap(), "energy-report"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# theoretical"));
    assert!(text.contains("BERT_S\t440\t89.40\t1.3946\t0.15496"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 8);
    assert_eq!(fs::read_to_string(dir.path().join("energy_report.tsv")).unwrap(), text);
}

#[test]
fn energy_report_custom_rows() {
    let o = drama(&["energy-report", "--row", "mine:1.5:2.0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mine\t1.5\t2.00\t0.0312\t0.00347"));
    let o = drama(&["energy-report", "--row", "broken"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn stage_without_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(dir.path(), &["index"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn staged_pipeline_matches_run_all() {
    let staged = tempfile::tempdir().unwrap();
    for stage in [
        "gen-data",
        "index",
        "tune-bm25",
        "train-teacher",
        "train-baseline",
        "distill-adapter",
        "train-gate",
        "rerank",
        "evaluate",
        "significance",
    ] {
        let o = tiny(staged.path(), &[stage]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    let seed_dir = staged.path().join("seed1");
    assert!(seed_dir.join("runs/DRAMA.dom0.run").exists());
    assert!(seed_dir.join("adapters/dom0.adapter").exists());
    assert!(seed_dir.join("gate.bin").exists());

    let whole = tempfile::tempdir().unwrap();
    let o = tiny(whole.path(), &["run-all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("variant\tdomain\tMAP@100\tMRR@10\tNDCG@10\tvs_S\tvs_ALL\tvs_RND"));
    let a = fs::read_to_string(staged.path().join("summary.tsv")).unwrap();
    let b = fs::read_to_string(whole.path().join("summary.tsv")).unwrap();
    assert_eq!(a, b);
    assert!(whole.path().join("gate_report.tsv").exists());
    assert!(whole.path().join("config.resolved").exists());
}

#[test]
fn rerank_before_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen-data", "index", "tune-bm25"] {
        assert_eq!(tiny(dir.path(), &[stage]).status.code(), Some(0));
    }
    let o = tiny(dir.path(), &["rerank"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
