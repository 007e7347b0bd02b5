//! Pretrains a product-form hypergraph embedding and answers EPFO queries
//! with the closed-form logical messages.

use hypercqa::baseline::{BaselineConfig, Family, KhgEmbedding};
use hypercqa::eval::{evaluate, EvalOptions};
use hypercqa::sampler::{ground, label_train};
use hypercqa::synthetic::{random_hypergraph, SyntheticSpec};
use hypercqa::{seeding, QueryType};

fn main() {
    let graph = random_hypergraph(&SyntheticSpec {
        entities: 30,
        arities: vec![2, 3],
        edges: 90,
        seed: 4,
    });
    let mut rng = seeding::stream(4, &[b"baseline-example"]);
    let mut instances = Vec::new();
    for t in [QueryType::P1, QueryType::P2, QueryType::I2, QueryType::U2, QueryType::In2] {
        for _ in 0..50 {
            let (tree, _) = ground(&t.template(), &graph, &mut rng, 100).unwrap();
            instances.push(label_train(t, tree, &graph));
        }
    }
    for family in [Family::MDistmult, Family::Hsimple] {
        let config = BaselineConfig {
            family,
            d: 32,
            epochs: 150,
            seed: 4,
            ..BaselineConfig::default()
        };
        let mut model = KhgEmbedding::new(config, graph.num_entities(), graph.num_relations()).unwrap();
        let log = model.pretrain(&graph).unwrap();
        let report = evaluate(&model, &instances, EvalOptions::default(), serde_json::Value::Null).unwrap();
        println!(
            "{family:?}\tloss {:.3} -> {:.3}\tskipped {}",
            log.losses[0],
            log.losses.last().unwrap(),
            report.skipped
        );
        for t in [QueryType::P1, QueryType::P2, QueryType::I2, QueryType::U2] {
            println!("  {}\t{:.3}", t.name(), report.mrr(t).unwrap_or(f64::NAN));
        }
    }
}
