//! Shared fixtures for the benchmark targets.

use steprl_core::model::{ModelConfig, ModelParams};
use steprl_core::task::{encode, generate_problem, solve_reference, Family, TokenSeq, Vocabulary};

pub fn bench_model(dim: usize, blocks: usize) -> ModelParams {
    ModelParams::init(
        ModelConfig {
            vocab: Vocabulary::size(),
            dim,
            blocks,
            heads: 2,
            context: 160,
        },
        7,
    )
}

pub fn bench_sequences(n: usize) -> Vec<TokenSeq> {
    (0..n as u64)
        .map(|seed| {
            let family = if seed % 2 == 0 { Family::Simple } else { Family::Complex };
            let p = generate_problem(family, seed);
            let s = solve_reference(&p);
            encode(&p, &s).expect("bench sequences encode")
        })
        .collect()
}
