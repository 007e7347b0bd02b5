//! Compares tape gradients with central differences on a tiny model.

use hypercqa::model::{gradient_check, LkhgtModel, ModelConfig};
use hypercqa::sampler::ground;
use hypercqa::synthetic::{random_hypergraph, SyntheticSpec};
use hypercqa::{seeding, QueryType};

fn main() {
    let graph = random_hypergraph(&SyntheticSpec {
        entities: 12,
        arities: vec![2, 3],
        edges: 30,
        seed: 2,
    });
    let mut rng = seeding::stream(2, &[b"gradcheck"]);
    let trees: Vec<_> = [QueryType::P1, QueryType::I2, QueryType::In2]
        .iter()
        .map(|t| ground(&t.template(), &graph, &mut rng, 100).unwrap())
        .collect();
    let items: Vec<_> = trees.iter().map(|(tree, root)| (tree, *root)).collect();
    let config = ModelConfig {
        d: 8,
        heads: 2,
        layers: 1,
        ..ModelConfig::desk()
    };
    let model = LkhgtModel::new(config, graph.num_entities(), graph.num_relations()).unwrap();
    let report = gradient_check(&model, &items, 1e-5, 1e-6).unwrap();
    println!(
        "{} scalars checked, max relative error {:.2e} at {}[{}]",
        report.checked, report.max_rel, report.worst_param, report.worst_index
    );
}
