//! Exact set-based evaluation of operator trees.

use std::collections::BTreeSet;

use crate::khg::{EntityId, KnowledgeHypergraph};
use crate::query::{Arg, QueryNode};

pub type AnswerSet = BTreeSet<EntityId>;

/// Answers of a validated tree. Negated projections are evaluated positively and
/// subtracted inside their enclosing intersection.
pub fn answers(tree: &QueryNode, graph: &KnowledgeHypergraph) -> AnswerSet {
    match tree {
        QueryNode::Projection { relation, args, .. } => {
            let Some(target) = tree.target_position() else {
                return AnswerSet::new();
            };
            let mut fixed = Vec::new();
            let mut subs: Vec<(usize, AnswerSet)> = Vec::new();
            for (pos, arg) in args.iter().enumerate() {
                match arg {
                    Arg::Const(e) => fixed.push((pos, *e)),
                    Arg::Sub(child) => {
                        let set = answers(child, graph);
                        if set.is_empty() {
                            return AnswerSet::new();
                        }
                        subs.push((pos, set));
                    }
                    Arg::Target => {}
                }
            }
            graph
                .narrowest(*relation, &fixed)
                .iter()
                .map(|&id| graph.edge(id))
                .filter(|h| h.relation == *relation && h.entities.len() == args.len())
                .filter(|h| fixed.iter().all(|&(p, e)| h.entities[p] == e))
                .filter(|h| subs.iter().all(|(p, set)| set.contains(&h.entities[*p])))
                .map(|h| h.entities[target])
                .collect()
        }
        QueryNode::Union(children) => children.iter().flat_map(|c| answers(c, graph)).collect(),
        QueryNode::Intersection(children) => {
            let mut positive: Option<AnswerSet> = None;
            for c in children.iter().filter(|c| !c.is_negated()) {
                let set = answers(c, graph);
                positive = Some(match positive {
                    None => set,
                    Some(acc) => acc.intersection(&set).copied().collect(),
                });
            }
            let mut result = positive.unwrap_or_default();
            for c in children.iter().filter(|c| c.is_negated()) {
                if result.is_empty() {
                    break;
                }
                let removed = answers(c, graph);
                result.retain(|e| !removed.contains(e));
            }
            result
        }
    }
}

/// Union over the conjunctive branches of a disjunctive normal form.
pub fn answers_dnf(trees: &[QueryNode], graph: &KnowledgeHypergraph) -> AnswerSet {
    trees.iter().flat_map(|t| answers(t, graph)).collect()
}
