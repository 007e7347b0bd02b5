//! Overfits a tiny closed hypergraph and prints the training curve.

use std::time::Instant;

use hypercqa::eval::{evaluate, EvalOptions};
use hypercqa::model::{train_with_log, LkhgtModel, ModelConfig, ScoreMode, TypeFilter};
use hypercqa::sampler::{ground, label_train};
use hypercqa::synthetic::{random_hypergraph, SyntheticSpec};
use hypercqa::{seeding, QueryType};

fn main() {
    let graph = random_hypergraph(&SyntheticSpec {
        entities: 50,
        arities: vec![2, 3, 4],
        edges: 150,
        seed: 11,
    });
    let mut rng = seeding::stream(11, &[b"overfit"]);
    let mut instances = Vec::new();
    for (t, n) in [(QueryType::P1, 500), (QueryType::I2, 200)] {
        for _ in 0..n {
            let (tree, _) = ground(&t.template(), &graph, &mut rng, 100).expect("groundable");
            instances.push(label_train(t, tree, &graph));
        }
    }
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let config = ModelConfig {
        d: 32,
        layers: 2,
        heads: 4,
        epochs,
        batch_size: 32,
        lr: 3e-3,
        score: ScoreMode::Logits,
        log_mrr_sample: 0,
        ..ModelConfig::desk()
    };
    let mut model = LkhgtModel::new(config, graph.num_entities(), graph.num_relations()).unwrap();
    let start = Instant::now();
    train_with_log(&mut model, &instances, &TypeFilter::All, |log| {
        if log.epoch % 10 == 0 {
            println!("epoch {}\tloss {:.4}\t{:.1}s", log.epoch, log.loss, start.elapsed().as_secs_f64());
        }
    })
    .unwrap();
    for filter_hard in [false, true] {
        let report = evaluate(&model, &instances, EvalOptions { filter_hard }, serde_json::Value::Null).unwrap();
        println!(
            "filter_hard={filter_hard}\t1P {:.3}\t2I {:.3}",
            report.mrr(QueryType::P1).unwrap(),
            report.mrr(QueryType::I2).unwrap()
        );
    }
}
