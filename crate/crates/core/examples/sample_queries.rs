//! Samples test queries of every type on a random hypergraph split and
//! reports their easy/hard answer counts.

use hypercqa::dataset::file_name;
use hypercqa::sampler::{sample_dataset, SampleSpec, Split};
use hypercqa::synthetic::{random_hypergraph, SyntheticSpec};
use hypercqa::{query, GraphSplits, QueryType};

fn main() {
    let full = random_hypergraph(&SyntheticSpec {
        entities: 120,
        arities: vec![2, 3, 4],
        edges: 600,
        seed: 5,
    });
    let splits = GraphSplits::holdout(&full, 0.8, 0.1, 5).unwrap();
    let dataset = sample_dataset(&SampleSpec::uniform(0, 0, 5, 5), &splits).unwrap();

    println!("file\tnodes\tmean easy\tmean hard");
    for t in QueryType::ALL {
        let qs = dataset.get(Split::Test, t);
        let mean = |f: fn(&query::QueryInstance) -> usize| {
            qs.iter().map(f).sum::<usize>() as f64 / qs.len() as f64
        };
        println!(
            "{}\t{}\t{:.1}\t{:.1}",
            file_name(Split::Test, t),
            t.template().node_count(),
            mean(|q| q.easy.len()),
            mean(|q| q.hard.len())
        );
    }

    let test = dataset.split(Split::Test);
    let text = query::to_jsonl(&test);
    assert_eq!(query::parse_jsonl(&text).unwrap(), test);
    println!("{} instances, hash {}", test.len(), &dataset.content_hash()[..16]);
    if let Some(pni) = test.iter().find(|q| q.qtype == QueryType::Pni) {
        println!("{}", pni.to_json());
    }
}
