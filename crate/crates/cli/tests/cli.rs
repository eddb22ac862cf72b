use codebias::corpus::{generate_corpus, load_corpus};
use codebias::harness::{ExperimentConfig, SuiteReport};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn codebias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codebias"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn tiny_config(dir: &Path, task: &str) -> String {
    let path = dir.join(format!("tiny_{task}.json"));
    let cfg = format!(
        r#"{{
  "task": "{task}",
  "generator": {{ "num_projects": 6, "samples_per_project": 24, "bias_strength": 0.9, "seed": 3 }},
  "train": {{ "epochs": 2, "batch_size": 8 }},
  "seeds": [1],
  "ig_steps": 4,
  "case_pages": 1
}}"#
    );
    fs::write(&path, cfg).unwrap();
    path.display().to_string()
}

#[test]
fn no_arguments_prints_synopsis_and_exits_1() {
    let o = codebias(&[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_bad_flag_exit_1() {
    assert_eq!(code(&codebias(&["frobnicate"])), 1);
    assert_eq!(code(&codebias(&["gen", "--seed", "abc"])), 1);
    assert_eq!(code(&codebias(&["train", "--mitigation", "magic"])), 1);
}

#[test]
fn help_exits_0() {
    let o = codebias(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["gen", "train", "attack", "analyze", "report", "run-all"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = codebias(&["gen", "--config", "/nonexistent/cfg.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_config_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"train": {"lr": -1.0}}"#).unwrap();
    let o = codebias(&["gen", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    fs::write(&path, r#"{"mitigation": "poe", "bpr": true}"#).unwrap();
    let o = codebias(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_writes_a_corpus_that_reloads_equal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "TypeInf");
    let out = dir.path().join("gen");
    let o = codebias(&["gen", "--config", &cfg_path, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echoed: ExperimentConfig =
        serde_json::from_str(&fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    let loaded = load_corpus(&out.join("corpus.jsonl")).unwrap();
    assert_eq!(loaded, generate_corpus(&echoed.generator).unwrap());
    assert_eq!(loaded.samples.len(), 6 * 24);
}

#[test]
fn train_attack_analyze_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "VulnDet");
    let out = dir.path().join("run");
    let o_str = out.to_str().unwrap();
    let o = codebias(&["train", "--config", &cfg_path, "--out", o_str, "--seed", "9", "--mitigation", "gradrev", "--bpr"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["setting"], "gradrev+bpr");
    assert!(out.join("checkpoint.json").exists());

    let o = codebias(&["attack", "--config", &cfg_path, "--out", o_str]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let adv = fs::read_to_string(out.join("adversarial.jsonl")).unwrap();
    assert!(adv.lines().count() > 0);
    assert!(adv.contains("\"perturbation\""));

    let o = codebias(&["analyze", "--config", &cfg_path, "--out", o_str]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["attributions.jsonl", "analysis.json", "cond_idf_vulnerable.csv", "cond_idf_safe.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn attack_without_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "VulnDet");
    let o = codebias(&["attack", "--config", &cfg_path, "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn run_all_then_report_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "VulnDet");
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = codebias(&["run-all", "--no-sweep", "--config", &cfg_path, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        metrics.push(fs::read(out.join("metrics.json")).unwrap());
        assert!(out.join("tables.csv").exists());
        assert!(out.join("config.resolved.json").exists());
    }
    assert_eq!(metrics[0], metrics[1]);
    let suite: SuiteReport = serde_json::from_slice(&metrics[0]).unwrap();
    assert_eq!(suite.reports.len(), 14);

    let again = dir.path().join("again");
    let m = dir.path().join("a").join("metrics.json");
    let o = codebias(&["report", "--metrics", m.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(again.join("tables.csv")).unwrap(), fs::read(dir.path().join("a").join("tables.csv")).unwrap());
}
