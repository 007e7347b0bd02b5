//! Closed-form logical-message baseline over product-form hypergraph
//! embeddings.
//!
//! A projection's estimate is `r ⊙ g(neighbours)`, where `g` folds the
//! (optionally shifted) neighbour vectors with an elementwise product.
//! Intersections and unions combine score vectors with `min` / `max`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalError, Scorer};
use crate::khg::KnowledgeHypergraph;
use crate::query::{Arg, QueryNode};
use crate::seeding;
use crate::tensor::{
    adam_step, read_checkpoint, write_checkpoint, AdamConfig, AdamState, CheckpointError, ParamId,
    ParamStore, Tape, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("cannot fold an empty sequence")]
    EmptySequence,
    #[error("position {0} appears twice or coincides with the target")]
    PositionClash(usize),
    #[error("negated queries have no closed-form message")]
    NegationUnsupported,
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("vector widths differ")]
    WidthMismatch,
    #[error("invalid baseline config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    MDistmult,
    MCp,
    Hype,
    Hsimple,
}

impl Family {
    pub fn shifts(self) -> bool {
        self == Family::Hsimple
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub family: Family,
    pub d: usize,
    /// Shift divisor, used by `Hsimple` only.
    pub alpha: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            family: Family::MDistmult,
            d: 32,
            alpha: 2,
            epochs: 200,
            batch_size: 128,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// Right fold of the elementwise product.
pub fn g_fold(vectors: &[Vec<f64>]) -> Result<Vec<f64>, BaselineError> {
    let (last, rest) = vectors.split_last().ok_or(BaselineError::EmptySequence)?;
    let mut acc = last.clone();
    for v in rest.iter().rev() {
        if v.len() != acc.len() {
            return Err(BaselineError::WidthMismatch);
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a *= x;
        }
    }
    Ok(acc)
}

/// Circular left rotation: `shift([1,2,3,4], 2) == [3,4,1,2]`.
pub fn shift(v: &[f64], by: usize) -> Vec<f64> {
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    (0..n).map(|i| v[(i + by) % n]).collect()
}

fn unshift(v: &[f64], by: usize) -> Vec<f64> {
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    shift(v, n - by % n)
}

/// Rotation applied to the vector in hyperedge slot `position`.
pub fn slot_shift(family: Family, position: usize, len: usize, alpha: usize) -> usize {
    if !family.shifts() || len == 0 || alpha == 0 {
        return 0;
    }
    (position * (len / alpha)) % len
}

/// Message to the `target` slot from the neighbours at their positions.
pub fn rho(
    neighbors: &[(Vec<f64>, usize)],
    relation: &[f64],
    target: usize,
    negated: bool,
    family: Family,
    alpha: usize,
) -> Result<Vec<f64>, BaselineError> {
    if negated {
        return Err(BaselineError::NegationUnsupported);
    }
    let mut seen = std::collections::BTreeSet::from([target]);
    for (_, p) in neighbors {
        if !seen.insert(*p) {
            return Err(BaselineError::PositionClash(*p));
        }
    }
    let len = relation.len();
    let shifted: Vec<Vec<f64>> = neighbors
        .iter()
        .map(|(v, p)| shift(v, slot_shift(family, *p, len, alpha)))
        .collect();
    let g = g_fold(&shifted)?;
    if g.len() != len {
        return Err(BaselineError::WidthMismatch);
    }
    Ok(relation.iter().zip(&g).map(|(r, x)| r * x).collect())
}

/// `Σ r ⊙ e_1 ⊙ ... ⊙ e_k` (no shifts).
pub fn edge_score(relation: &[f64], entities: &[Vec<f64>]) -> Result<f64, BaselineError> {
    let g = g_fold(entities)?;
    if g.len() != relation.len() {
        return Err(BaselineError::WidthMismatch);
    }
    Ok(relation.iter().zip(&g).map(|(r, x)| r * x).sum())
}

#[derive(Debug, Clone)]
pub struct KhgEmbedding {
    config: BaselineConfig,
    params: ParamStore,
    entity: ParamId,
    relation: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

fn permutation(d: usize, by: usize) -> Tensor {
    // x · P == shift(x, by)
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        data[((i + by) % d) * d + i] = 1.0;
    }
    Tensor::new(vec![d, d], data).expect("square")
}

impl KhgEmbedding {
    pub fn new(config: BaselineConfig, num_entities: usize, num_relations: usize) -> Result<Self, BaselineError> {
        if config.d == 0 || config.batch_size == 0 {
            return Err(BaselineError::Config("d and batch_size must be positive".into()));
        }
        if config.family.shifts() && (config.alpha == 0 || !config.d.is_multiple_of(config.alpha)) {
            return Err(BaselineError::Config(format!(
                "alpha = {} must divide d = {}",
                config.alpha, config.d
            )));
        }
        let mut rng = seeding::stream(config.seed, &[b"baseline-init"]);
        let dist = Normal::new(0.0, 0.5).expect("valid std");
        let mut table = |rows: usize| {
            let data = (0..rows * config.d).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(vec![rows, config.d], data)
        };
        let mut params = ParamStore::new();
        let entity = params.add("entity", table(num_entities)?)?;
        let relation = params.add("relation", table(num_relations)?)?;
        Ok(KhgEmbedding {
            config,
            params,
            entity,
            relation,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn num_entities(&self) -> usize {
        self.params.get(self.entity).rows()
    }

    pub fn entity_row(&self, e: usize) -> &[f64] {
        self.params.get(self.entity).row_slice(e)
    }

    pub fn relation_row(&self, r: usize) -> &[f64] {
        self.params.get(self.relation).row_slice(r)
    }

    fn slot(&self, position: usize) -> usize {
        slot_shift(self.config.family, position, self.config.d, self.config.alpha)
    }

    /// Scores of every entity for a negation-free query.
    pub fn score_query(&self, tree: &QueryNode) -> Result<Vec<f64>, BaselineError> {
        if contains_negation(tree) {
            return Err(BaselineError::NegationUnsupported);
        }
        self.node_scores(tree)
    }

    fn node_scores(&self, node: &QueryNode) -> Result<Vec<f64>, BaselineError> {
        match node {
            QueryNode::Projection { .. } => {
                let est = self.estimate(node)?;
                Ok(self.dot_all(&est))
            }
            QueryNode::Intersection(cs) | QueryNode::Union(cs) => {
                let min = matches!(node, QueryNode::Intersection(_));
                let mut acc: Option<Vec<f64>> = None;
                for c in cs {
                    let s = self.node_scores(c)?;
                    acc = Some(match acc {
                        None => s,
                        Some(a) => a
                            .iter()
                            .zip(&s)
                            .map(|(x, y)| if min { x.min(*y) } else { x.max(*y) })
                            .collect(),
                    });
                }
                acc.ok_or(BaselineError::EmptySequence)
            }
        }
    }

    fn dot_all(&self, v: &[f64]) -> Vec<f64> {
        let table = self.params.get(self.entity);
        (0..table.rows())
            .map(|e| table.row_slice(e).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Entity-space vector whose inner product with entity rows gives the
    /// node's scores.
    fn estimate(&self, node: &QueryNode) -> Result<Vec<f64>, BaselineError> {
        match node {
            QueryNode::Projection {
                relation,
                args,
                negated,
            } => {
                let mut neighbors = Vec::new();
                let mut target = None;
                for (pos, arg) in args.iter().enumerate() {
                    match arg {
                        Arg::Const(e) => neighbors.push((self.entity_row(e.index()).to_vec(), pos)),
                        Arg::Sub(child) => neighbors.push((self.estimate(child)?, pos)),
                        Arg::Target => target = Some(pos),
                    }
                }
                let target = target.ok_or(BaselineError::PositionClash(usize::MAX))?;
                let m = rho(
                    &neighbors,
                    self.relation_row(relation.index()),
                    target,
                    *negated,
                    self.config.family,
                    self.config.alpha,
                )?;
                // m · shift(c, s) == unshift(m, s) · c
                Ok(unshift(&m, self.slot(target)))
            }
            QueryNode::Intersection(_) | QueryNode::Union(_) => {
                let scores = self.node_scores(node)?;
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = w.iter().sum();
                let table = self.params.get(self.entity);
                let mut out = vec![0.0; self.config.d];
                for (e, we) in w.iter().enumerate() {
                    for (o, x) in out.iter_mut().zip(table.row_slice(e)) {
                        *o += we / z * x;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Cross-entropy over every (edge, position) pair of the graph.
    pub fn pretrain(&mut self, graph: &KnowledgeHypergraph) -> Result<PretrainReport, BaselineError> {
        if graph.num_edges() == 0 {
            return Err(BaselineError::EmptyGraph);
        }
        let examples: Vec<(usize, usize)> = graph
            .edges()
            .iter()
            .enumerate()
            .flat_map(|(i, e)| (0..e.entities.len()).map(move |p| (i, p)))
            .collect();
        let mut adam = AdamState::new(
            &self.params,
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
        );
        let mut losses = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut order = examples.clone();
            order.shuffle(&mut seeding::stream(
                self.config.seed,
                &[b"baseline-order", &(epoch as u64).to_le_bytes()],
            ));
            let mut total = 0.0;
            for batch in order.chunks(self.config.batch_size) {
                let (loss, grads) = {
                    let mut tape = Tape::new(&self.params);
                    let loss = self.batch_loss(&mut tape, graph, batch)?;
                    (tape.value(loss).item()?, tape.backward(loss)?)
                };
                total += loss * batch.len() as f64;
                adam_step(&mut self.params, &grads, &mut adam);
            }
            losses.push(total / examples.len() as f64);
        }
        Ok(PretrainReport { losses })
    }

    /// Mean loss of the whole graph without updating.
    pub fn loss(&self, graph: &KnowledgeHypergraph) -> Result<f64, BaselineError> {
        let examples: Vec<(usize, usize)> = graph
            .edges()
            .iter()
            .enumerate()
            .flat_map(|(i, e)| (0..e.entities.len()).map(move |p| (i, p)))
            .collect();
        let mut tape = Tape::new(&self.params);
        let loss = self.batch_loss(&mut tape, graph, &examples)?;
        Ok(tape.value(loss).item()?)
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        graph: &KnowledgeHypergraph,
        batch: &[(usize, usize)],
    ) -> Result<Var, BaselineError> {
        let d = self.config.d;
        let ent = tape.param(self.entity);
        let rel = tape.param(self.relation);
        let mut perms: BTreeMap<usize, Var> = BTreeMap::new();
        let mut shifted = |tape: &mut Tape<'_>, x: Var, by: usize| -> Result<Var, BaselineError> {
            if by == 0 {
                return Ok(x);
            }
            let p = *perms
                .entry(by)
                .or_insert_with(|| tape.constant(permutation(d, by)));
            Ok(tape.matmul(x, p)?)
        };
        let mut candidates: BTreeMap<usize, Var> = BTreeMap::new();
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for &(edge, target) in batch {
            let h = &graph.edges()[edge];
            let mut m = tape.gather_rows(rel, &[h.relation.index()])?;
            for (pos, e) in h.entities.iter().enumerate() {
                if pos == target {
                    continue;
                }
                let v = tape.gather_rows(ent, &[e.index()])?;
                let v = shifted(tape, v, self.slot(pos))?;
                m = tape.mul(m, v)?;
            }
            let s = self.slot(target);
            let cand = match candidates.get(&s) {
                Some(c) => *c,
                None => {
                    let c = shifted(tape, ent, s)?;
                    let c = tape.transpose(c);
                    candidates.insert(s, c);
                    c
                }
            };
            rows.push(tape.matmul(m, cand)?);
            targets.push(h.entities[target].index());
        }
        let logits = tape.concat_rows(&rows)?;
        Ok(tape.cross_entropy(logits, &targets)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        let mut meta = BTreeMap::new();
        meta.insert(
            "baseline".to_string(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        write_checkpoint(path, &self.params, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let ck = read_checkpoint(path)?;
        let config: BaselineConfig = ck
            .meta
            .get("baseline")
            .ok_or_else(|| BaselineError::Config("checkpoint lacks baseline meta".into()))
            .and_then(|s| serde_json::from_str(s).map_err(|e| BaselineError::Config(e.to_string())))?;
        let entity = ck.params.id("entity").ok_or(BaselineError::Config("no entity table".into()))?;
        let relation = ck.params.id("relation").ok_or(BaselineError::Config("no relation table".into()))?;
        Ok(KhgEmbedding {
            config,
            params: ck.params,
            entity,
            relation,
        })
    }
}

fn contains_negation(node: &QueryNode) -> bool {
    node.projections().iter().any(|p| p.is_negated())
}

impl Scorer for KhgEmbedding {
    fn scores(&self, tree: &QueryNode) -> Result<Vec<f64>, EvalError> {
        self.score_query(tree).map_err(|e| EvalError::Scorer(e.to_string()))
    }

    fn supports(&self, tree: &QueryNode) -> bool {
        !contains_negation(tree)
    }
}
