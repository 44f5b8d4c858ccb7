//! Scratch calibration runs for picking default configs. Not part of the
//! deliverable surface; run with:
//!   cargo run --release -p steprl-core --example calibrate -- <mode> [toml overrides...]

use std::time::Instant;

use steprl_core::checkpoint;
use steprl_core::config::ExperimentConfig;
use steprl_core::harness::Harness;
use steprl_core::rm::{evaluate_rm, RmExample, RmObjective};
use steprl_core::sft::{eval_accuracy, DecodeMode};
use steprl_core::task::load_corpus;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "sft".into());
    let overrides = std::env::args().nth(2).unwrap_or_default();
    let mut cfg = if overrides.is_empty() {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::from_toml(&overrides).unwrap()
    };
    cfg.out_dir = std::env::temp_dir()
        .join("steprl_calib_runs")
        .display()
        .to_string();

    let harness = Harness::new(cfg.clone(), true).unwrap();
    eprintln!("run dir: {}", harness.root().display());

    let t = Instant::now();
    harness.ensure_corpus().unwrap();
    eprintln!("corpus: {:?}", t.elapsed());

    match mode.as_str() {
        "sft" => {
            let t = Instant::now();
            let ckpt = harness.ensure_sft().unwrap();
            eprintln!("sft stage: {:?}", t.elapsed());
            let params = checkpoint::load(&ckpt).unwrap().params;
            let eval_s = load_corpus(&harness.root().join("corpus/eval_simple.jsonl")).unwrap();
            let eval_c = load_corpus(&harness.root().join("corpus/eval_complex.jsonl")).unwrap();
            let t = Instant::now();
            let ev_s = eval_accuracy(&params, &eval_s, DecodeMode::Greedy).unwrap();
            let ev_c = eval_accuracy(&params, &eval_c, DecodeMode::Greedy).unwrap();
            eprintln!("eval: {:?}", t.elapsed());
            eprintln!("simple:  {ev_s:?}");
            eprintln!("complex: {ev_c:?}");
            // dump metrics stream
            let metrics = std::fs::read_to_string(harness.root().join("sft/metrics.jsonl")).unwrap();
            for line in metrics.lines() {
                eprintln!("  {line}");
            }
        }
        "rm" => {
            for objective in [RmObjective::Orm, RmObjective::Prm] {
                let t = Instant::now();
                let ckpt = harness.ensure_rm(objective).unwrap();
                eprintln!("{} stage: {:?}", objective.as_str(), t.elapsed());
                let params = checkpoint::load(&ckpt).unwrap().params;
                let val = load_corpus(&harness.root().join("corpus/rm_val.jsonl")).unwrap();
                let val_ex: Vec<RmExample> = val
                    .iter()
                    .map(|r| RmExample::from_record(r).unwrap())
                    .collect();
                let ev = evaluate_rm(&params, objective, &val_ex).unwrap();
                eprintln!("{} held-out: {:?}", objective.as_str(), ev);
            }
        }
        "ppo" => {
            let t = Instant::now();
            let dir = harness
                .ensure_ppo_cell(cfg.ppo.reward_scheme, cfg.ppo.prompt_mix)
                .unwrap();
            eprintln!("ppo cell: {:?} -> {}", t.elapsed(), dir.display());
            let metrics = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
            for line in metrics.lines() {
                eprintln!("  {line}");
            }
        }
        "compare" => {
            let t = Instant::now();
            let table = harness.compare_schemes().unwrap();
            eprintln!("compare-schemes: {:?}", t.elapsed());
            eprintln!("{}", table.to_csv());
        }
        "gen" => {
            // inspect sample generations of the sft model
            let ckpt = harness.ensure_sft().unwrap();
            let params = checkpoint::load(&ckpt).unwrap().params;
            let eval_s = load_corpus(&harness.root().join("corpus/eval_simple.jsonl")).unwrap();
            for rec in eval_s.iter().take(10) {
                let prompt = steprl_core::task::prompt_tokens(&rec.prompt).unwrap();
                let mut rng = steprl_core::rng::Rng::new(0);
                let out = steprl_core::model::sample(
                    &params,
                    &prompt,
                    0.0,
                    params.cfg.context - prompt.len(),
                    steprl_core::task::EOS,
                    &mut rng,
                )
                .unwrap();
                let text: String = out
                    .tokens
                    .iter()
                    .filter_map(|&id| steprl_core::task::Vocabulary::decode_id(id))
                    .collect();
                let reference = rec.solution().text();
                eprintln!("prompt: {}", rec.prompt);
                eprintln!("  model: {text}");
                eprintln!("  oracle: {reference}");
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
