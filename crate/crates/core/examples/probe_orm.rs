// overfit probe: ORM on 32 examples must memorize; if not, gradients are broken
use steprl_core::graph::Graph;
use steprl_core::metrics::MetricsSink;
use steprl_core::model::{GraphModel, ModelConfig, ModelParams};
use steprl_core::optim::{OptimizerConfig, OptimizerState};
use steprl_core::rm::{orm_loss_node, RmExample};
use steprl_core::task::{build_corpus, load_corpus, CorpusSpec, FamilyCounts, Vocabulary};

fn main() {
    let dir = std::env::temp_dir().join("steprl_probe_orm");
    let spec = CorpusSpec {
        rm_train: FamilyCounts { simple: 32, complex: 0 },
        rm_val: FamilyCounts { simple: 8, complex: 0 },
        sft_train: FamilyCounts { simple: 8, complex: 0 },
        sft_val: FamilyCounts { simple: 4, complex: 0 },
        eval: FamilyCounts { simple: 4, complex: 1 },
        ..CorpusSpec::default()
    };
    let files = build_corpus(&spec, 7, &dir).unwrap();
    let recs = load_corpus(&files.rm_train).unwrap();
    let n_corrupt = recs.iter().filter(|r| !r.answer_correct).count();
    eprintln!("labels: {} corrupt / {}", n_corrupt, recs.len());
    let examples: Vec<RmExample> = recs.iter().map(|r| RmExample::from_record(r).unwrap()).collect();

    let mut params = ModelParams::init(
        ModelConfig { vocab: Vocabulary::size(), dim: 64, blocks: 2, heads: 2, context: 160 },
        3,
    );
    let mut opt = OptimizerState::new(&params, OptimizerConfig {
        base_lr: 1e-2, weight_decay: 0.0, horizon: 400, ..OptimizerConfig::new(1e-2, 400)
    });
    let _sink = MetricsSink::memory();
    for step in 0..400 {
        let mut g = Graph::new();
        let gm = GraphModel::bind(&mut g, &params);
        let mut nodes = Vec::new();
        for ex in &examples {
            let logits = gm.forward(&mut g, &ex.tokens.tokens, steprl_core::model::Head::Classifier).unwrap();
            nodes.push(orm_loss_node(&mut g, logits, ex));
        }
        let mut acc = nodes[0];
        for &n in &nodes[1..] { acc = g.add(acc, n); }
        let loss = g.scale(acc, 1.0 / examples.len() as f64);
        let v = g.value(loss).item();
        if step % 50 == 0 { eprintln!("step {step}: loss {v:.5}"); }
        g.backward(loss).unwrap();
        let grads = gm.grads(&g);
        // gradient magnitude diagnostics on first step
        if step == 0 {
            for (name, _) in params.params() {
                let i = params.params().iter().position(|(n, _)| n == &name).unwrap();
                let gn: f64 = grads[i].data.iter().map(|v| v * v).sum::<f64>().sqrt();
                if name.contains("cls") || name == "embed" || name.contains("block1.wv") {
                    eprintln!("  |grad {name}| = {gn:.6}");
                }
            }
        }
        opt.apply(&mut params, &grads).unwrap();
    }
}
