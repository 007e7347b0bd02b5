//! Grounds query shapes against a hypergraph and labels the results.
//!
//! Grounding walks the shape top-down from a random root answer: each
//! projection picks an edge incident to its current answer, puts `Target` at
//! the answer's position, and, when it has a child, hands one neighbouring
//! slot to the child as that child's answer. Logical nodes ground every child
//! from the same answer. Every attempt is checked with the exact oracle before
//! it is accepted, so the root is always an answer of the returned tree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::QueryDataset;
use crate::khg::{EdgeId, EntityId, GraphSplits, KnowledgeHypergraph};
use crate::oracle;
use crate::query::{Arg, QueryInstance, QueryNode, QueryType, Shape};
use crate::seeding;

/// Retries spent on one branch before a duplicate or bad negation gives up the attempt.
const BRANCH_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("sampling failed after {attempts} attempts")]
    SamplingFailed { attempts: usize },
    #[error("{split} {qtype}: only {found} of {requested} instances after {slots} tries")]
    SamplingExhausted {
        split: Split,
        qtype: QueryType,
        found: usize,
        requested: usize,
        slots: usize,
    },
    #[error("graph has no edges to sample from")]
    EmptyGraph,
    #[error("retry budget must be at least 1")]
    ZeroBudget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSpec {
    pub counts: BTreeMap<(Split, QueryType), usize>,
    /// Grounding attempts allowed per query.
    pub retry_budget: usize,
    pub seed: u64,
}

impl SampleSpec {
    /// Benchmark-sized counts: 60,000 train 1P, 20,000 for every other train
    /// type and 10,000 per type for valid and test.
    pub fn benchmark(seed: u64) -> Self {
        let mut counts = BTreeMap::new();
        for t in QueryType::ALL {
            counts.insert((Split::Train, t), if t == QueryType::P1 { 60_000 } else { 20_000 });
            counts.insert((Split::Valid, t), 10_000);
            counts.insert((Split::Test, t), 10_000);
        }
        SampleSpec {
            counts,
            retry_budget: 100,
            seed,
        }
    }

    /// Same count for every type within a split.
    pub fn uniform(train: usize, valid: usize, test: usize, seed: u64) -> Self {
        let mut counts = BTreeMap::new();
        for t in QueryType::ALL {
            counts.insert((Split::Train, t), train);
            counts.insert((Split::Valid, t), valid);
            counts.insert((Split::Test, t), test);
        }
        SampleSpec {
            counts,
            retry_budget: 100,
            seed,
        }
    }
}

/// Where one projection of a grounded tree came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionTrace {
    pub edge: EdgeId,
    pub target_position: usize,
    pub answer: EntityId,
    pub negated: bool,
}

#[derive(Debug, Clone)]
pub struct Grounding {
    pub tree: QueryNode,
    pub root: EntityId,
    /// One entry per projection, in pre-order.
    pub trace: Vec<ProjectionTrace>,
}

/// Grounds `shape` on `graph`, retrying up to `retry_budget` times.
pub fn ground<R: Rng>(
    shape: &Shape,
    graph: &KnowledgeHypergraph,
    rng: &mut R,
    retry_budget: usize,
) -> Result<(QueryNode, EntityId), SampleError> {
    ground_traced(shape, graph, rng, retry_budget).map(|g| (g.tree, g.root))
}

pub fn ground_traced<R: Rng>(
    shape: &Shape,
    graph: &KnowledgeHypergraph,
    rng: &mut R,
    retry_budget: usize,
) -> Result<Grounding, SampleError> {
    if retry_budget == 0 {
        return Err(SampleError::ZeroBudget);
    }
    let pool = answer_pool(graph);
    if pool.is_empty() {
        return Err(SampleError::EmptyGraph);
    }
    let mut grounder = Grounder { graph, pool: &pool };
    for _ in 0..retry_budget {
        if let Some(g) = grounder.attempt(shape, rng) {
            return Ok(g);
        }
    }
    Err(SampleError::SamplingFailed {
        attempts: retry_budget,
    })
}

fn answer_pool(graph: &KnowledgeHypergraph) -> Vec<EntityId> {
    (0..graph.num_entities() as u32)
        .map(EntityId)
        .filter(|&e| graph.degree(e) > 0)
        .collect()
}

struct Grounder<'a> {
    graph: &'a KnowledgeHypergraph,
    pool: &'a [EntityId],
}

impl Grounder<'_> {
    fn attempt<R: Rng>(&mut self, shape: &Shape, rng: &mut R) -> Option<Grounding> {
        let root = *self.pool.choose(rng)?;
        let mut trace = Vec::new();
        let tree = self.node(shape, root, rng, &mut trace)?;
        if !oracle::answers(&tree, self.graph).contains(&root) {
            return None;
        }
        Some(Grounding { tree, root, trace })
    }

    fn node<R: Rng>(
        &mut self,
        shape: &Shape,
        answer: EntityId,
        rng: &mut R,
        trace: &mut Vec<ProjectionTrace>,
    ) -> Option<QueryNode> {
        match shape {
            Shape::Projection {
                negated: false,
                child,
            } => self.projection(child.as_deref(), answer, rng, trace),
            Shape::Projection {
                negated: true,
                child,
            } => {
                // Ground positively from some other entity, then require that
                // the current answer is not among the atom's answers.
                for _ in 0..BRANCH_RETRIES {
                    let source = *self.pool.choose(rng)?;
                    if source == answer {
                        continue;
                    }
                    let mut local = Vec::new();
                    let Some(positive) = self.projection(child.as_deref(), source, rng, &mut local)
                    else {
                        continue;
                    };
                    if oracle::answers(&positive, self.graph).contains(&answer) {
                        continue;
                    }
                    let QueryNode::Projection { relation, args, .. } = positive else {
                        unreachable!("projection shape grounds to a projection")
                    };
                    if let Some(first) = local.first_mut() {
                        first.negated = true;
                    }
                    trace.extend(local);
                    return Some(QueryNode::Projection {
                        relation,
                        args,
                        negated: true,
                    });
                }
                None
            }
            Shape::Intersection(children) | Shape::Union(children) => {
                let mut grounded: Vec<QueryNode> = Vec::with_capacity(children.len());
                for child in children {
                    let mut accepted = None;
                    for _ in 0..BRANCH_RETRIES {
                        let mut local = Vec::new();
                        let Some(node) = self.node(child, answer, rng, &mut local) else {
                            continue;
                        };
                        if grounded.contains(&node) {
                            continue;
                        }
                        trace.extend(local);
                        accepted = Some(node);
                        break;
                    }
                    grounded.push(accepted?);
                }
                Some(match shape {
                    Shape::Intersection(_) => QueryNode::Intersection(grounded),
                    _ => QueryNode::Union(grounded),
                })
            }
        }
    }

    fn projection<R: Rng>(
        &mut self,
        child: Option<&Shape>,
        answer: EntityId,
        rng: &mut R,
        trace: &mut Vec<ProjectionTrace>,
    ) -> Option<QueryNode> {
        let &(edge_id, target) = self.graph.incident(answer).ok()?.choose(rng)?;
        let edge = self.graph.edge(edge_id);
        let slot = trace.len();
        trace.push(ProjectionTrace {
            edge: edge_id,
            target_position: target,
            answer,
            negated: false,
        });
        let mut args: Vec<Arg> = edge.entities.iter().map(|&e| Arg::Const(e)).collect();
        args[target] = Arg::Target;
        if let Some(child) = child {
            let others: Vec<usize> = (0..args.len()).filter(|&j| j != target).collect();
            let &hop = others.choose(rng)?;
            let next = edge.entities[hop];
            let sub = self.node(child, next, rng, trace);
            let Some(sub) = sub else {
                trace.truncate(slot);
                return None;
            };
            args[hop] = Arg::Sub(Box::new(sub));
        }
        Some(QueryNode::Projection {
            relation: edge.relation,
            args,
            negated: false,
        })
    }
}

/// Easy answers come from `small`, hard answers are the extra ones in `big`.
pub fn label(
    qtype: QueryType,
    tree: QueryNode,
    small: &KnowledgeHypergraph,
    big: &KnowledgeHypergraph,
) -> QueryInstance {
    let easy = oracle::answers(&tree, small);
    let hard = oracle::answers(&tree, big)
        .into_iter()
        .filter(|e| !easy.contains(e))
        .collect();
    QueryInstance {
        qtype,
        tree,
        easy,
        hard,
    }
}

/// Training labels: there is no smaller graph, so every answer is a target.
pub fn label_train(qtype: QueryType, tree: QueryNode, graph: &KnowledgeHypergraph) -> QueryInstance {
    let hard = oracle::answers(&tree, graph);
    QueryInstance {
        qtype,
        tree,
        easy: BTreeSet::new(),
        hard,
    }
}

/// Samples every `(split, type)` with a positive count. Train queries are
/// grounded on the train graph; valid on valid (easy = train answers); test
/// on test (easy = valid answers). Instances without hard answers are dropped.
pub fn sample_dataset(spec: &SampleSpec, splits: &GraphSplits) -> Result<QueryDataset, SampleError> {
    if spec.retry_budget == 0 {
        return Err(SampleError::ZeroBudget);
    }
    let mut dataset = QueryDataset::default();
    for (&(split, qtype), &count) in &spec.counts {
        if count == 0 {
            continue;
        }
        let instances = sample_split(spec, splits, split, qtype, count)?;
        dataset.insert(split, qtype, instances);
    }
    Ok(dataset)
}

fn sample_split(
    spec: &SampleSpec,
    splits: &GraphSplits,
    split: Split,
    qtype: QueryType,
    count: usize,
) -> Result<Vec<QueryInstance>, SampleError> {
    let (graph, small) = match split {
        Split::Train => (&splits.train, None),
        Split::Valid => (&splits.valid, Some(&splits.train)),
        Split::Test => (&splits.test, Some(&splits.valid)),
    };
    if graph.num_edges() == 0 {
        return Err(SampleError::EmptyGraph);
    }
    let shape = qtype.template();
    let max_slots = count.saturating_mul(100);
    let mut out = Vec::with_capacity(count);
    let mut next = 0usize;
    while out.len() < count && next < max_slots {
        let need = count - out.len();
        let end = (next + need.max(16)).min(max_slots);
        let batch: Vec<Option<QueryInstance>> = (next..end)
            .into_par_iter()
            .map(|slot| {
                let mut rng = seeding::stream(
                    spec.seed,
                    &[
                        split.name().as_bytes(),
                        qtype.name().as_bytes(),
                        &(slot as u64).to_le_bytes(),
                    ],
                );
                let (tree, _) = ground(&shape, graph, &mut rng, spec.retry_budget).ok()?;
                let inst = match small {
                    None => label_train(qtype, tree, graph),
                    Some(small) => label(qtype, tree, small, graph),
                };
                (!inst.hard.is_empty()).then_some(inst)
            })
            .collect();
        next = end;
        out.extend(batch.into_iter().flatten().take(need));
    }
    if out.len() < count {
        return Err(SampleError::SamplingExhausted {
            split,
            qtype,
            found: out.len(),
            requested: count,
            slots: next,
        });
    }
    Ok(out)
}
