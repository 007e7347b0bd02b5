//! Random hypergraphs for tests, examples and sanity runs.

use rand::seq::index;
use rand::Rng;

use crate::khg::{EntityId, Hyperedge, KnowledgeHypergraph, RelationId, Vocabulary};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub entities: usize,
    /// Arity of each relation.
    pub arities: Vec<usize>,
    pub edges: usize,
    pub seed: u64,
}

/// Uniformly random facts with distinct entities per edge. Entities are
/// named `e<i>` and relations `r<j>`; all ids are registered even if unused.
pub fn random_hypergraph(spec: &SyntheticSpec) -> KnowledgeHypergraph {
    assert!(!spec.arities.is_empty(), "at least one relation");
    assert!(
        spec.arities.iter().all(|&k| k >= 1 && k <= spec.entities),
        "arity must fit the entity count"
    );
    let mut vocab = Vocabulary::default();
    for i in 0..spec.entities {
        vocab.intern_entity(&format!("e{i}"));
    }
    for (j, &k) in spec.arities.iter().enumerate() {
        vocab
            .intern_relation(&format!("r{j}"), k, 0)
            .expect("fresh relation names");
    }
    let mut rng = seeding::stream(spec.seed, &[b"synthetic"]);
    let mut seen = std::collections::HashSet::new();
    let mut edges = Vec::with_capacity(spec.edges);
    let mut tries = 0usize;
    while edges.len() < spec.edges && tries < spec.edges.saturating_mul(50) + 100 {
        tries += 1;
        let r = rng.random_range(0..spec.arities.len());
        let k = spec.arities[r];
        let entities = index::sample(&mut rng, spec.entities, k)
            .into_iter()
            .map(|i| EntityId(i as u32))
            .collect();
        let h = Hyperedge {
            relation: RelationId(r as u32),
            entities,
        };
        if seen.insert(h.clone()) {
            edges.push(h);
        }
    }
    KnowledgeHypergraph::from_edges(vocab, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let spec = SyntheticSpec {
            entities: 50,
            arities: vec![2, 3, 4],
            edges: 150,
            seed: 11,
        };
        let a = random_hypergraph(&spec);
        let b = random_hypergraph(&spec);
        assert_eq!(a.num_edges(), 150);
        assert_eq!(a.num_entities(), 50);
        assert_eq!(a.edges(), b.edges());
        assert!(a.edges().iter().all(|h| {
            let mut v = h.entities.clone();
            v.sort();
            v.dedup();
            v.len() == h.entities.len()
        }));
    }
}
