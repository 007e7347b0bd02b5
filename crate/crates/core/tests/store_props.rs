use std::collections::BTreeSet;

use proptest::prelude::*;

use hypercqa::synthetic::{random_hypergraph, SyntheticSpec};
use hypercqa::{EntityId, GraphSplits, KnowledgeHypergraph, RelationId};

fn graph_strategy() -> impl Strategy<Value = KnowledgeHypergraph> {
    (4usize..20, prop::collection::vec(1usize..5, 1..4), 0usize..80, any::<u64>()).prop_map(
        |(entities, arities, edges, seed)| {
            let arities = arities.into_iter().map(|k| k.min(entities)).collect();
            random_hypergraph(&SyntheticSpec {
                entities,
                arities,
                edges,
                seed,
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn match_pattern_agrees_with_scan(g in graph_strategy(), pick in any::<u64>()) {
        for r in 0..g.num_relations() {
            let rel = RelationId(r as u32);
            let k = g.arity(rel).unwrap();
            for target in 0..k {
                // bind every other slot to the entity it holds in some edge, or to e0
                let template = g.relation_edges(rel).get(pick as usize % g.relation_edges(rel).len().max(1));
                let bindings: Vec<(usize, EntityId)> = (0..k)
                    .filter(|&p| p != target && (pick >> p) & 1 == 1)
                    .map(|p| (p, template.map_or(EntityId(0), |&id| g.edge(id).entities[p])))
                    .collect();
                let fast = g.match_pattern(rel, &bindings, target).unwrap();
                let slow: BTreeSet<EntityId> = g
                    .edges()
                    .iter()
                    .filter(|h| h.relation == rel && bindings.iter().all(|&(p, e)| h.entities[p] == e))
                    .map(|h| h.entities[target])
                    .collect();
                prop_assert_eq!(fast, slow);
            }
        }
    }

    #[test]
    fn indexes_match_edge_set(g in graph_strategy()) {
        let mut seen = 0;
        for e in 0..g.num_entities() {
            let e = EntityId(e as u32);
            for &(id, pos) in g.incident(e).unwrap() {
                prop_assert_eq!(g.edge(id).entities[pos], e);
                seen += 1;
            }
            prop_assert_eq!(g.degree(e), g.incident(e).unwrap().len());
        }
        let slots: usize = g.edges().iter().map(|h| h.entities.len()).sum();
        prop_assert_eq!(seen, slots);
        for (id, h) in g.edges().iter().enumerate() {
            prop_assert!(g.contains(h));
            prop_assert!(g.relation_edges(h.relation).contains(&id));
        }
    }

    #[test]
    fn facts_text_round_trips(g in graph_strategy()) {
        prop_assume!(g.num_edges() > 0);
        let text = g.to_facts_text();
        let back = KnowledgeHypergraph::parse_facts(&text).unwrap();
        prop_assert_eq!(back.to_facts_text(), text);
        prop_assert_eq!(back.num_edges(), g.num_edges());
    }

    #[test]
    fn holdout_splits_nest(g in graph_strategy(), seed in any::<u64>()) {
        prop_assume!(g.num_edges() >= 10);
        let s = GraphSplits::holdout(&g, 0.8, 0.1, seed).unwrap();
        prop_assert!(s.train.edges().iter().all(|h| s.valid.contains(h)));
        prop_assert!(s.valid.edges().iter().all(|h| s.test.contains(h)));
        prop_assert_eq!(s.test.num_edges(), g.num_edges());
    }
}
