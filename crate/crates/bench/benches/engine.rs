use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use steprl_bench::{bench_model, bench_sequences};
use steprl_core::graph::Graph;
use steprl_core::model::{forward, GraphModel, Head};

fn forward_infer(c: &mut Criterion) {
    let params = bench_model(64, 2);
    let seqs = bench_sequences(8);
    c.bench_function("forward_infer_d64_b2", |b| {
        b.iter(|| {
            for seq in &seqs {
                std::hint::black_box(forward(&params, &seq.tokens, Head::Lm).unwrap());
            }
        })
    });
}

fn forward_backward_graph(c: &mut Criterion) {
    let params = bench_model(64, 2);
    let seqs = bench_sequences(4);
    c.bench_function("forward_backward_d64_b2", |b| {
        b.iter_batched(
            Graph::new,
            |mut g| {
                let gm = GraphModel::bind(&mut g, &params);
                let mut losses = Vec::new();
                for seq in &seqs {
                    let logits = gm.forward(&mut g, &seq.tokens, Head::Lm).unwrap();
                    let logp = g.log_softmax_rows(logits);
                    losses.push(g.mean(logp));
                }
                let mut acc = losses[0];
                for &l in &losses[1..] {
                    acc = g.add(acc, l);
                }
                let loss = g.neg(acc);
                g.backward(loss).unwrap();
                std::hint::black_box(gm.grads(&g));
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, forward_infer, forward_backward_graph);
criterion_main!(benches);
