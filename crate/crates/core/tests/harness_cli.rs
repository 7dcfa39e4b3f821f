// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use strkit::config::ExperimentConfig;
use strkit::corpus::to_jsonl;
use strkit::harness::{self, Experiment};
use strkit::prompting::EmphasisTarget;

use common::toy_corpus;

fn setup(dir: &Path, extra: &str) -> std::path::PathBuf {
    fs::write(
        dir.join("toy.jsonl"),
        to_jsonl(&toy_corpus("toy", 12, 3)).unwrap(),
    )
    .unwrap();
    fs::write(
        dir.join("train.jsonl"),
        to_jsonl(&toy_corpus("toy", 8, 4)).unwrap(),
    )
    .unwrap();
    let cfg = dir.join("exp.conf");
    fs::write(
        &cfg,
        format!(
            "# toy experiment\nmodel_name = toy\ndataset.toy = toy.jsonl\nmax_new = 8\n{extra}"
        ),
    )
    .unwrap();
    cfg
}

fn strkit(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_strkit"))
        .args(args)
        .output()
        .unwrap()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect()
}

#[test]
fn ne_only_config_gives_two_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = strkit(&["eval", "--config", cfg.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("out/cells.csv")).unwrap();
    assert!(csv.starts_with("# model=toy config_sha256="));
    assert!(csv.contains("\nmodel,dataset,order,method,target,n,accuracy,mean_ppl\n"));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("toy,toy,question_first,NE,none,6,"));
    assert!(rows[1].starts_with("toy,toy,context_first,NE,none,6,"));
    assert!(dir.path().join("out/cells.txt").exists());
    assert!(dir.path().join("out/examples.csv").exists());

    let report = strkit(&[
        "report",
        "--csv",
        dir.path().join("out/cells.csv").to_str().unwrap(),
    ]);
    assert!(report.status.success());
    assert_eq!(
        String::from_utf8(report.stdout).unwrap(),
        fs::read_to_string(dir.path().join("out/cells.txt")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = setup(
        dir.path(),
        "methods = NE, AS\ntargets = question_and_context\n",
    );
    let out = strkit(&["eval", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 6"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    assert_eq!(strkit(&["eval"]).status.code(), Some(1));

    // malformed corpus is a runtime failure
    let cfg = setup(dir.path(), "");
    fs::write(dir.path().join("toy.jsonl"), "{not json}\n").unwrap();
    assert_eq!(
        strkit(&["eval", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn profile_then_steer_reproduces_validation_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(
        dir.path(),
        "train.toy = train.jsonl\nsubset_size = 6\nmethods = NE, AS\ntargets = question, context\n\
         orders = context_first\nhead_set = out/profile.json\neval_split = valid\nk_grid = 1..4\n",
    );
    let exp = Experiment::from_path(&cfg).unwrap();
    let profile = harness::cmd_profile(&exp, None).unwrap();
    assert_eq!(profile.runs.len(), 2);
    for run in &profile.runs {
        assert_eq!(run.score_maps.len(), 1);
        assert_eq!(run.score_maps[0].scores.len(), 4);
        assert_eq!(
            run.selection.k_curve.keys().copied().collect::<Vec<_>>(),
            [1, 2, 3, 4]
        );
    }
    let reread = harness::ProfileReport::read(&dir.path().join("out/profile.json")).unwrap();
    assert_eq!(reread, profile);

    let cells = harness::cmd_eval(&exp, None).unwrap();
    assert_eq!(cells.len(), 3);
    for run in &profile.runs {
        let cell = cells
            .iter()
            .find(|c| c.method == "AS" && c.target == run.target)
            .unwrap();
        assert_eq!(cell.accuracy, run.selection.best_accuracy, "{}", run.target);
    }
}

#[test]
fn as_without_head_set_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "methods = AS\ntargets = context\n");
    let exp = Experiment::load(ExperimentConfig::load(&cfg).unwrap()).unwrap();
    let err = harness::run_eval(&exp).unwrap_err();
    assert!(err.is_config_error(), "{err}");
}

#[test]
fn partition_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(
        dir.path(),
        "methods = NE, MP-star\ntargets = question\neval_split = all\n",
    );
    let exp = Experiment::from_path(&cfg).unwrap();
    let out = harness::cmd_partition(&exp, Some(&dir.path().join("k"))).unwrap();
    assert_eq!(out.partitions.len(), 1);
    assert_eq!(out.partitions[0].total(), 12);
    assert_eq!(out.rows.len(), 2);
    assert!(out
        .rows
        .iter()
        .all(|r| r.target == EmphasisTarget::Question));
    let csv = fs::read_to_string(dir.path().join("k/knowledge.csv")).unwrap();
    assert_eq!(data_rows(&csv).len(), 2);
    let p = &out.partitions[0];
    assert_eq!(
        out.rows[0].knowledge_amount,
        p.known_ids.len() as f64 / 12.0
    );

    harness::cmd_partition(&exp, Some(&dir.path().join("k2"))).unwrap();
    for f in ["knowledge.csv", "partition.json", "knowledge.txt"] {
        assert_eq!(
            fs::read(dir.path().join("k").join(f)).unwrap(),
            fs::read(dir.path().join("k2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn weights_file_round_trip_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "model.seed = 4\n");
    let w = dir.path().join("w.bin");
    let out = strkit(&[
        "init-weights",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        w.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let random = Experiment::from_path(&cfg).unwrap();
    let cfg2 = dir.path().join("w.conf");
    fs::write(
        &cfg2,
        "model_name = toy\ndataset.toy = toy.jsonl\nmax_new = 8\nweights = w.bin\n",
    )
    .unwrap();
    let loaded = Experiment::from_path(&cfg2).unwrap();
    assert_eq!(loaded.weights_hash, random.weights_hash);
    assert_eq!(loaded.model, random.model);
}
