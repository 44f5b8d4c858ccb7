//! SFT baseline floor: the fixed-seed training recipe below was measured at
//! 0.89 greedy final-answer accuracy on held-out simple problems; the test
//! pins the 0.80 floor. This is the slowest test in the suite (a full
//! supervised training run at d = 64).

use steprl_core::checkpoint;
use steprl_core::config::ExperimentConfig;
use steprl_core::harness::Harness;
use steprl_core::sft::{eval_accuracy, DecodeMode};
use steprl_core::task::load_corpus;

#[test]
fn sft_baseline_reaches_simple_accuracy_floor() {
    let out = std::env::temp_dir().join("steprl_sft_baseline");
    std::fs::remove_dir_all(&out).ok();
    let mut cfg = ExperimentConfig::from_toml(
        r#"
seed = 42

[corpus]
sft_train = { simple = 3500, complex = 0 }
sft_val = { simple = 150, complex = 0 }
rm_train = { simple = 8, complex = 8 }
rm_val = { simple = 4, complex = 4 }
eval = { simple = 200, complex = 1 }

[sft]
epochs = 30
base_lr = 1e-2
weight_decay = 0.1
"#,
    )
    .unwrap();
    cfg.out_dir = out.display().to_string();

    let harness = Harness::new(cfg, false).unwrap();
    let ckpt = harness.ensure_sft().unwrap();
    let params = checkpoint::load(&ckpt).unwrap().params;

    let eval_set = load_corpus(&harness.root().join("corpus/eval_simple.jsonl")).unwrap();
    let metrics = eval_accuracy(&params, &eval_set, DecodeMode::Greedy).unwrap();
    println!(
        "sft baseline: accuracy {:.3}, well-formed {:.3}, step correctness {:.3}",
        metrics.final_answer_accuracy, metrics.well_formed_rate, metrics.step_correctness
    );
    assert!(
        metrics.final_answer_accuracy >= 0.80,
        "simple held-out accuracy {:.3} below the 0.80 floor",
        metrics.final_answer_accuracy
    );

    // reloading the checkpoint reproduces the metrics bit-exactly
    let reloaded = checkpoint::load(&ckpt).unwrap().params;
    let again = eval_accuracy(&reloaded, &eval_set, DecodeMode::Greedy).unwrap();
    assert_eq!(metrics, again);
    std::fs::remove_dir_all(&out).ok();
}
