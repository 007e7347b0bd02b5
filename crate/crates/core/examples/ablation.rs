//! Trains the full model and its three ablations on the same small dataset.

use hypercqa::eval::{ablate, AblationSpec, EvalOptions, Variant};
use hypercqa::model::{ModelConfig, ScoreMode, TypeFilter};
use hypercqa::sampler::{sample_dataset, SampleSpec};
use hypercqa::synthetic::{random_hypergraph, SyntheticSpec};
use hypercqa::GraphSplits;

fn main() {
    let full = random_hypergraph(&SyntheticSpec {
        entities: 60,
        arities: vec![2, 3, 4],
        edges: 300,
        seed: 8,
    });
    let splits = GraphSplits::holdout(&full, 0.8, 0.1, 8).unwrap();
    let dataset = sample_dataset(&SampleSpec::uniform(40, 0, 20, 8), &splits).unwrap();
    let (train, test) = hypercqa::eval::splits_of(&dataset);
    let base = ModelConfig {
        d: 16,
        heads: 2,
        epochs: 5,
        batch_size: 32,
        lr: 2e-3,
        score: ScoreMode::Logits,
        log_mrr_sample: 0,
        ..ModelConfig::desk()
    };
    let spec = AblationSpec {
        variants: Variant::ALL.to_vec(),
        seeds: vec![0, 1],
        filter: TypeFilter::All,
        options: EvalOptions::default(),
        ..AblationSpec::from_dataset(base, &dataset, &train, &test, full.num_entities(), full.num_relations())
    };
    let report = ablate(&spec).unwrap();
    print!("{}", report.to_tsv());
}
