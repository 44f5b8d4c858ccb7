use criterion::{criterion_group, criterion_main, Criterion};

use steprl_core::ppo::compute_gae;
use steprl_core::reward::{aggregate, shape_rewards, Aggregator, RewardScheme, SchemeKind};
use steprl_core::rm::StepScores;
use steprl_core::rng::Rng;

fn aggregators(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let scores: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
    c.bench_function("aggregate_all_four_len64", |b| {
        b.iter(|| {
            for kind in [Aggregator::Avg, Aggregator::Prod, Aggregator::Max, Aggregator::Min] {
                std::hint::black_box(aggregate(kind, &scores).unwrap());
            }
        })
    });
}

fn shaping_and_gae(c: &mut Criterion) {
    let mut rng = Rng::new(5);
    let kl: Vec<f64> = (0..96).map(|_| rng.gauss() * 0.1).collect();
    let step_scores = StepScores {
        per_step: (0..9).map(|_| rng.uniform()).collect(),
        sequence: 0.5,
    };
    let values: Vec<f64> = (0..96).map(|_| rng.gauss()).collect();
    let scheme = RewardScheme::new(SchemeKind::PrmProd);
    c.bench_function("shape_rewards_plus_gae_len96", |b| {
        b.iter(|| {
            let shaped = shape_rewards(&scheme, &kl, 0.5, &step_scores).unwrap();
            std::hint::black_box(compute_gae(&shaped.per_token, &values, 1.0, 0.95).unwrap());
        })
    });
}

criterion_group!(benches, aggregators, shaping_and_gae);
criterion_main!(benches);
