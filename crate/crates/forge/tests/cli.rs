//! End-to-end tests of the `igpo-forge` binary.

use std::path::Path;
use std::process::{Command, Output};

use igpo_core::pipeline::CleanReport;
use igpo_core::Trajectory;
use serde_json::Value;

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_igpo-forge")).args(args).env("IGPO_FORGE_THREADS", "2").output().unwrap()
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_for_every_subcommand_exits_zero() {
    for sub in ["clean", "resample", "gen-tasks", "train", "eval", "report"] {
        let out = forge(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(!out.stdout.is_empty());
    }
    assert_eq!(forge(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    let out = forge(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(forge(&["clean", "--in", "x"]).status.code(), Some(2));
    assert_eq!(forge(&[]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one() {
    let out = forge(&["train", "--config", "/nonexistent/missing.json", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    let tmp = scratch();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.json"), r#"{"learning_rate": 0.1, "no_such_field": 1}"#).unwrap();
    assert_eq!(forge(&["train", "--config", &s(&dir.join("bad.json")), "--out", &s(dir)]).status.code(), Some(1));
    assert_eq!(forge(&["resample", "--in", "x", "--out", "y", "--weights", "1,2"]).status.code(), Some(1));
    assert_eq!(forge(&["clean", "--in", "x", "--out", "y", "--report", "z", "--judge", "plugin"]).status.code(), Some(1));
}

#[test]
fn clean_and_resample_pipeline() {
    let tmp = scratch();
    let dir = tmp.path();
    ok(&forge(&["gen-tasks", "--seed", "1", "--hops", "2", "--count", "3", "--out", &s(&dir.join("tasks")), "--raw-demos", &s(&dir.join("raw.jsonl"))]));
    let mut raw = std::fs::read_to_string(dir.join("raw.jsonl")).unwrap();
    // One unreadable line, one record without a query, one with a wrong answer.
    raw.push_str("{broken\n{\"messages\": []}\n");
    raw.push_str(r#"{"messages":[{"role":"user","content":"q"},{"role":"assistant","tool_call":{"name":"python","arguments":["x"]}},{"role":"tool","content":"o"},{"role":"assistant","answer":"nope"}],"ground_truth":"yes"}"#);
    raw.push('\n');
    std::fs::write(dir.join("raw.jsonl"), raw).unwrap();
    ok(&forge(&["clean", "--in", &s(&dir.join("raw.jsonl")), "--out", &s(&dir.join("clean.jsonl")), "--report", &s(&dir.join("report.json"))]));
    let report: CleanReport = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.input_count, 6);
    assert_eq!(report.converted_count, 4);
    assert_eq!(report.trajectories_with_disallowed, 1);
    assert_eq!(report.retained_after_judge, 3);
    assert!(report.is_consistent());
    let cleaned: Vec<Trajectory> = std::fs::read_to_string(dir.join("clean.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(cleaned.len(), 3);

    let out = forge(&["resample", "--in", &s(&dir.join("clean.jsonl")), "--out", &s(&dir.join("sft.jsonl")), "--weights", "2,3,4"]);
    ok(&out);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["resampled_total"], 6);
    assert_eq!(std::fs::read_to_string(dir.join("sft.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn plugin_judge_runs_an_external_command() {
    let tmp = scratch();
    let dir = tmp.path();
    ok(&forge(&["gen-tasks", "--seed", "2", "--hops", "1", "--count", "2", "--out", &s(&dir.join("tasks")), "--raw-demos", &s(&dir.join("raw.jsonl"))]));
    let reject = dir.join("reject.sh");
    std::fs::write(&reject, "#!/bin/sh\nexit 1\n").unwrap();
    let unsure = dir.join("unsure.sh");
    std::fs::write(&unsure, "#!/bin/sh\nexit 7\n").unwrap();
    for p in [&reject, &unsure] {
        Command::new("chmod").arg("+x").arg(p).status().unwrap();
    }
    let run = |judge: &Path| {
        ok(&forge(&[
            "clean", "--in", &s(&dir.join("raw.jsonl")), "--out", &s(&dir.join("c.jsonl")), "--report", &s(&dir.join("r.json")),
            "--judge", "plugin", "--judge-cmd", &s(judge), "--held-out", &s(&dir.join("held.jsonl")),
        ]));
        let r: CleanReport = serde_json::from_str(&std::fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
        let held = std::fs::read_to_string(dir.join("held.jsonl")).unwrap().lines().count();
        (r.retained_after_judge, held)
    };
    assert_eq!(run(&reject), (0, 0));
    assert_eq!(run(&unsure), (0, 2));
}

#[test]
fn train_eval_report() {
    let tmp = scratch();
    let dir = tmp.path();
    ok(&forge(&["gen-tasks", "--seed", "0", "--hops", "2", "--count", "2", "--out", &s(&dir.join("tasks"))]));
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"tasks": "tasks", "total_steps": 3, "feature_dim": 128, "group_size": 4, "sft_steps": 2, "eval_every": 3}"#,
    )
    .unwrap();
    ok(&forge(&["train", "--config", &s(&dir.join("cfg.json")), "--out", &s(&dir.join("run")), "--seed", "12", "--traces"]));
    let run: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 12);
    let metrics = std::fs::read_to_string(dir.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let last: Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert!(last["mean_J"].is_number());
    assert!(last["eval_success"].is_number());
    assert_eq!(std::fs::read_dir(dir.join("run/reward_traces")).unwrap().count(), 3);

    ok(&forge(&[
        "eval", "--checkpoint", &s(&dir.join("run/checkpoint.bin")), "--tasks", &s(&dir.join("tasks")),
        "--n", "4", "--k", "1,4", "--out", &s(&dir.join("eval.json")), "--runs", "2",
    ]));
    let eval: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    for key in ["pass_at_k", "browse_ratio", "mean_turns", "pass_at_k_pooled", "records"] {
        assert!(eval.get(key).is_some(), "{key}");
    }
    assert_eq!(eval["records"][0]["n"], 8);
    let p1 = eval["pass_at_k"]["001"].as_f64().unwrap();
    let p4 = eval["pass_at_k"]["004"].as_f64().unwrap();
    assert!(p1 <= p4);

    ok(&forge(&[
        "eval", "--checkpoint", &s(&dir.join("run/checkpoint.bin")), "--tasks", &s(&dir.join("tasks")),
        "--n", "4", "--k", "1,4", "--out", &s(&dir.join("eval_vs.json")), "--baseline", &s(&dir.join("run/initial.bin")),
    ]));
    let vs: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("eval_vs.json")).unwrap()).unwrap();
    let gap = vs["baseline"]["gap"]["001"].as_f64().unwrap();
    let expected = vs["pass_at_k"]["001"].as_f64().unwrap() - vs["baseline"]["pass_at_k"]["001"].as_f64().unwrap();
    assert!((gap - expected).abs() < 1e-15);
    assert!(vs["baseline"]["gap_largest_at_smallest_k"].is_boolean());
    // Pass@k needs k <= n.
    let bad = forge(&[
        "eval", "--checkpoint", &s(&dir.join("run/checkpoint.bin")), "--tasks", &s(&dir.join("tasks")),
        "--n", "2", "--k", "4", "--out", &s(&dir.join("e2.json")),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let table = forge(&["report", "--metrics", &s(&dir.join("run/metrics.jsonl"))]);
    ok(&table);
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.starts_with("  step"));
    assert_eq!(text.lines().count(), 4);
}
