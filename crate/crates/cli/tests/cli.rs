//! Black-box tests of the `steprl` binary: exit codes, artifact layout, and
//! the machine-readable error record contract.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_steprl"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("steprl_cli_tests").join(name);
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CONFIG: &str = r#"
seed = 3

[model]
dim = 12
blocks = 1
heads = 2

[corpus]
sft_train = { simple = 24, complex = 8 }
sft_val = { simple = 6, complex = 2 }
rm_train = { simple = 24, complex = 8 }
rm_val = { simple = 8, complex = 4 }
eval = { simple = 6, complex = 4 }

[sft]
epochs = 1
base_lr = 2e-3

[orm]
epochs = 1
[prm]
epochs = 1

[ppo]
total_steps = 1
rollout_batch = 3
minibatch = 2
max_new = 32
eval_every = 0

[eval]
table_prompts = 4
train_probe_prompts = 2
"#;

fn write_config(dir: &std::path::Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn gen_data_writes_corpora_and_exits_zero() {
    let dir = tmp("gen");
    let cfg = write_config(&dir);
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("runs"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let run_line = stdout.lines().find(|l| l.starts_with("artifacts:")).unwrap();
    let root = PathBuf::from(run_line.trim_start_matches("artifacts:").trim());
    for file in [
        "corpus/sft_train.jsonl",
        "corpus/sft_val.jsonl",
        "corpus/rm_train.jsonl",
        "corpus/rm_val.jsonl",
        "corpus/eval_simple.jsonl",
        "corpus/eval_complex.jsonl",
        "config.toml",
    ] {
        assert!(root.join(file).exists(), "missing {file}");
    }
}

#[test]
fn bad_objective_fails_with_json_error_record() {
    let dir = tmp("bad_objective");
    let cfg = write_config(&dir);
    let out = bin()
        .args(["train-rm", "--objective", "bogus", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("runs"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let record: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert!(record["error"].as_str().unwrap().contains("bogus"));
    assert_eq!(record["command"], "train-rm");
}

#[test]
fn eval_on_empty_run_fails_fast_with_missing_artifact() {
    let dir = tmp("eval_missing");
    let cfg = write_config(&dir);
    let out = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("runs"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let record: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert!(record["error"]
        .as_str()
        .unwrap()
        .contains("missing dependency artifact"));
}

#[test]
fn run_pipeline_end_to_end_then_report_idempotent() {
    let dir = tmp("pipeline");
    let cfg = write_config(&dir);
    let runs = dir.join("runs");
    let out = bin()
        .args(["run-pipeline", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&runs)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("scheme,prompt_mix,eval_family"));

    let run_line = stdout.lines().find(|l| l.starts_with("artifacts:")).unwrap();
    let root = PathBuf::from(run_line.trim_start_matches("artifacts:").trim());
    let results = root.join("eval/results.csv");
    assert!(results.exists());
    let before = std::fs::read(&results).unwrap();

    // report subcommand regenerates identical bytes
    let out = bin()
        .args(["report", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&runs)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(before, std::fs::read(&results).unwrap());

    // rerun with --resume touches nothing and prints the same table
    let rerun = bin()
        .args(["run-pipeline", "--resume", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&runs)
        .output()
        .unwrap();
    assert!(rerun.status.success());
    assert_eq!(
        String::from_utf8_lossy(&rerun.stdout)
            .lines()
            .filter(|l| l.contains(','))
            .collect::<Vec<_>>(),
        stdout.lines().filter(|l| l.contains(',')).collect::<Vec<_>>()
    );
}

#[test]
fn seed_flag_changes_run_id() {
    let dir = tmp("seeds");
    let cfg = write_config(&dir);
    let run = |seed: &str| {
        let out = bin()
            .args(["gen-data", "--seed", seed, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.join("runs"))
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8_lossy(&out.stdout)
            .lines()
            .find(|l| l.starts_with("run-id:"))
            .unwrap()
            .to_string()
    };
    assert_ne!(run("1"), run("2"));
}
