//! The two-stage query transformer.
//!
//! Projections are answered by the projection encoder over the tokens of one
//! atom (`[n] r a_1 ... a_k`), intersections and unions by the logical encoder
//! over `[i|u] p_1 ... p_m`. Both stacks use type-aware attention: query,
//! key and value maps are chosen by token type, and every key receives a
//! learned bias vector for its `(attending type, attended type)` pair.
//! A query tree is executed bottom-up, one encoder call per operator node.

mod config;
mod gradcheck;
mod train;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Cardinality, DecoderMode, LogicalMode, ModelConfig, Positional, ScoreMode};
pub use gradcheck::{gradient_check, GradCheck};
pub use train::{train, train_with_log, EpochLog, TrainReport, TypeFilter};

use crate::khg::EntityId;
use crate::query::{Arg, QueryNode};
use crate::seeding::{self, Rng};
use crate::tensor::{
    read_checkpoint, write_checkpoint, CheckpointError, ParamId, ParamStore, Tape, Tensor,
    TensorError, Var,
};

const LN_EPS: f64 = 1e-5;
const FUZZY_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no child embedding for argument slot {0}")]
    MissingChildEmbedding(usize),
    #[error("logical operator needs at least 2 children, got {0}")]
    TooFewChildren(usize),
    #[error("token type {0:?} is not handled by this encoder")]
    TypeNotInStack(TokenType),
    #[error("projection has no target argument")]
    NoTarget,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("train-set metric failed: {0}")]
    Metric(String),
    #[error("training set is empty after filtering")]
    EmptyDataset,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match the model: {0}")]
    ParamMismatch(String),
}

/// The eight token roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenType {
    Negation,
    Relation,
    Existential,
    Entity,
    Free,
    Projected,
    Intersection,
    Union,
}

impl TokenType {
    pub const ALL: [TokenType; 8] = [
        TokenType::Negation,
        TokenType::Relation,
        TokenType::Existential,
        TokenType::Entity,
        TokenType::Free,
        TokenType::Projected,
        TokenType::Intersection,
        TokenType::Union,
    ];

    pub const PROJECTION: [TokenType; 5] = [
        TokenType::Negation,
        TokenType::Relation,
        TokenType::Existential,
        TokenType::Entity,
        TokenType::Free,
    ];

    pub const LOGICAL: [TokenType; 3] =
        [TokenType::Projected, TokenType::Intersection, TokenType::Union];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> char {
        ['n', 'r', 'x', 'e', 'y', 'p', 'i', 'u'][self.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stack {
    Projection,
    Logical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogicalOp {
    Intersection,
    Union,
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    bias: ParamId,
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct StackIds {
    types: Vec<TokenType>,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
}

impl StackIds {
    fn local(&self, t: TokenType) -> Result<usize, ModelError> {
        self.types
            .iter()
            .position(|&x| x == t)
            .ok_or(ModelError::TypeNotInStack(t))
    }
}

#[derive(Debug, Clone)]
struct Ids {
    entity: ParamId,
    relation: ParamId,
    input: Vec<ParamId>,
    negation: ParamId,
    placeholder_x: ParamId,
    placeholder_y: ParamId,
    op_i: ParamId,
    op_u: ParamId,
    projection: StackIds,
    logical: StackIds,
    dec1: (ParamId, ParamId),
    dec2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct LkhgtModel {
    config: ModelConfig,
    num_entities: usize,
    num_relations: usize,
    params: ParamStore,
    ids: Ids,
}

/// Encoder usage during one execution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub projection_calls: usize,
    /// Intersection/union nodes processed (encoder or fuzzy).
    pub logical_calls: usize,
    /// Logical-encoder stack passes; exceeds `logical_calls` under pairwise folding.
    pub logical_passes: usize,
}

impl ExecStats {
    /// One invocation per operator node.
    pub fn invocations(&self) -> usize {
        self.projection_calls + self.logical_calls
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId, ModelError> {
        let dist = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(self.store.add(name, Tensor::new(shape.to_vec(), data)?)?)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId, ModelError> {
        let n = shape.iter().product();
        Ok(self.store.add(name, Tensor::new(shape.to_vec(), vec![value; n])?)?)
    }

    fn stack(
        &mut self,
        prefix: &str,
        types: &[TokenType],
        config: &ModelConfig,
    ) -> Result<StackIds, ModelError> {
        let d = config.d;
        let hidden = d * config.ffn_mult;
        let wstd = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let typed = |kind: &str, init: &mut Self| -> Result<Vec<ParamId>, ModelError> {
                types
                    .iter()
                    .map(|t| init.normal(format!("{prefix}.{l}.{kind}.{}", t.symbol()), &[d, d], wstd))
                    .collect()
            };
            let wq = typed("wq", self)?;
            let wk = typed("wk", self)?;
            let wv = typed("wv", self)?;
            layers.push(LayerIds {
                wq,
                wk,
                wv,
                wo: self.normal(format!("{prefix}.{l}.wo"), &[d, d], wstd)?,
                bias: self.normal(format!("{prefix}.{l}.tab"), &[64, d], 0.02)?,
                ln1: (
                    self.fill(format!("{prefix}.{l}.ln1.gain"), &[1, d], 1.0)?,
                    self.fill(format!("{prefix}.{l}.ln1.bias"), &[1, d], 0.0)?,
                ),
                ln2: (
                    self.fill(format!("{prefix}.{l}.ln2.gain"), &[1, d], 1.0)?,
                    self.fill(format!("{prefix}.{l}.ln2.bias"), &[1, d], 0.0)?,
                ),
                ff1: (
                    self.normal(format!("{prefix}.{l}.ff1.w"), &[d, hidden], wstd)?,
                    self.fill(format!("{prefix}.{l}.ff1.b"), &[1, hidden], 0.0)?,
                ),
                ff2: (
                    self.normal(format!("{prefix}.{l}.ff2.w"), &[hidden, d], 1.0 / (hidden as f64).sqrt())?,
                    self.fill(format!("{prefix}.{l}.ff2.b"), &[1, d], 0.0)?,
                ),
            });
        }
        Ok(StackIds {
            types: types.to_vec(),
            layers,
            final_ln: (
                self.fill(format!("{prefix}.final.gain"), &[1, d], 1.0)?,
                self.fill(format!("{prefix}.final.bias"), &[1, d], 0.0)?,
            ),
        })
    }
}

/// Sinusoidal encoding of one position.
pub fn sinusoidal(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let angle = position as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl LkhgtModel {
    pub fn new(config: ModelConfig, num_entities: usize, num_relations: usize) -> Result<Self, ModelError> {
        config.check().map_err(ModelError::Config)?;
        if num_entities == 0 || num_relations == 0 {
            return Err(ModelError::Config("vocabulary is empty".into()));
        }
        let d = config.d;
        let wstd = 1.0 / (d as f64).sqrt();
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: seeding::stream(config.seed, &[b"init"]),
        };
        let entity = init.normal("entity".into(), &[num_entities, d], 1.0)?;
        let relation = init.normal("relation".into(), &[num_relations, d], 1.0)?;
        let input = TokenType::ALL
            .iter()
            .map(|t| init.normal(format!("input.{}", t.symbol()), &[d, d], wstd))
            .collect::<Result<_, _>>()?;
        let negation = init.normal("token.n".into(), &[1, d], 1.0)?;
        let placeholder_x = init.normal("token.x".into(), &[1, d], 1.0)?;
        let placeholder_y = init.normal("token.y".into(), &[1, d], 1.0)?;
        let op_i = init.normal("token.i".into(), &[1, d], 1.0)?;
        let op_u = init.normal("token.u".into(), &[1, d], 1.0)?;
        let projection = init.stack("proj", &TokenType::PROJECTION, &config)?;
        let logical = init.stack("logic", &TokenType::LOGICAL, &config)?;
        let dec1 = (
            init.normal("decoder.w1".into(), &[d, d], wstd)?,
            init.fill("decoder.b1".into(), &[1, d], 0.0)?,
        );
        let dec2 = (
            init.normal("decoder.w2".into(), &[d, num_entities], 0.1 * wstd)?,
            init.fill("decoder.b2".into(), &[1, num_entities], 0.0)?,
        );
        Ok(LkhgtModel {
            config,
            num_entities,
            num_relations,
            params: store,
            ids: Ids {
                entity,
                relation,
                input,
                negation,
                placeholder_x,
                placeholder_y,
                op_i,
                op_u,
                projection,
                logical,
                dec1,
                dec2,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes how [`scores`](Self::scores) ranks entities.
    pub fn set_score_mode(&mut self, score: ScoreMode) {
        self.config.score = score;
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn stack(&self, which: Stack) -> &StackIds {
        match which {
            Stack::Projection => &self.ids.projection,
            Stack::Logical => &self.ids.logical,
        }
    }

    /// Answer embedding of the tree's free variable.
    pub fn execute(&self, tree: &QueryNode) -> Result<(Vec<f64>, ExecStats), ModelError> {
        let mut fwd = Forward::new(self);
        let z = fwd.execute(tree)?;
        Ok((fwd.tape.value(z).data().to_vec(), fwd.stats))
    }

    /// Decoder logits for an embedding of width `d`.
    pub fn decode(&self, embedding: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut fwd = Forward::new(self);
        let z = fwd.tape.constant(Tensor::row(embedding.to_vec()));
        let logits = fwd.decode(z)?;
        Ok(fwd.tape.value(logits).data().to_vec())
    }

    /// Cosine similarity of `embedding` with every entity-table row.
    pub fn cosine_scores(&self, embedding: &[f64]) -> Vec<f64> {
        let table = self.params.get(self.ids.entity);
        let zn = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        (0..self.num_entities)
            .map(|e| {
                let row = table.row_slice(e);
                let dot: f64 = row.iter().zip(embedding).map(|(a, b)| a * b).sum();
                let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if zn == 0.0 || rn == 0.0 {
                    0.0
                } else {
                    dot / (zn * rn)
                }
            })
            .collect()
    }

    /// Per-entity scores under `mode`.
    pub fn scores_with(&self, tree: &QueryNode, mode: ScoreMode) -> Result<Vec<f64>, ModelError> {
        let (z, _) = self.execute(tree)?;
        match mode {
            ScoreMode::Cosine => Ok(self.cosine_scores(&z)),
            ScoreMode::Logits => self.decode(&z),
        }
    }

    pub fn scores(&self, tree: &QueryNode) -> Result<Vec<f64>, ModelError> {
        self.scores_with(tree, self.config.score)
    }

    /// Entities outside `exclude`, best first; ties go to the smaller id.
    pub fn rank(
        &self,
        tree: &QueryNode,
        exclude: &std::collections::BTreeSet<EntityId>,
    ) -> Result<Vec<EntityId>, ModelError> {
        let scores = self.scores(tree)?;
        Ok(crate::eval::rank_scores(&scores, exclude))
    }

    fn forward_loss<'a>(
        fwd: &mut Forward<'a>,
        items: &[(&QueryNode, EntityId)],
    ) -> Result<Var, ModelError> {
        let mut rows = Vec::with_capacity(items.len());
        for (tree, _) in items {
            let z = fwd.execute(tree)?;
            rows.push(fwd.decode(z)?);
        }
        let logits = fwd.tape.concat_rows(&rows)?;
        let targets: Vec<usize> = items.iter().map(|(_, a)| a.index()).collect();
        Ok(fwd.tape.cross_entropy(logits, &targets)?)
    }

    /// Mean cross-entropy of the decoder over `(tree, answer)` pairs.
    pub fn loss(&self, items: &[(&QueryNode, EntityId)]) -> Result<f64, ModelError> {
        let mut fwd = Forward::new(self);
        let loss = Self::forward_loss(&mut fwd, items)?;
        Ok(fwd.tape.value(loss).item()?)
    }

    /// [`loss`](Self::loss) together with its gradient.
    pub fn loss_and_grads(
        &self,
        items: &[(&QueryNode, EntityId)],
        dropout_rng: Option<Rng>,
    ) -> Result<(f64, crate::tensor::Gradients), ModelError> {
        let mut fwd = Forward::new(self);
        fwd.dropout = dropout_rng;
        let loss = Self::forward_loss(&mut fwd, items)?;
        let value = fwd.tape.value(loss).item()?;
        Ok((value, fwd.tape.backward(loss)?))
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<(), ModelError> {
        let mut meta = extra.clone();
        meta.insert("config".into(), self.config.to_json());
        meta.insert("num_entities".into(), self.num_entities.to_string());
        meta.insert("num_relations".into(), self.num_relations.to_string());
        write_checkpoint(path, &self.params, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>), ModelError> {
        let ck = read_checkpoint(path)?;
        let get = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| ModelError::ParamMismatch(format!("missing meta `{k}`")))
        };
        let config: ModelConfig = serde_json::from_str(get("config")?)
            .map_err(|e| ModelError::ParamMismatch(e.to_string()))?;
        let parse = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::ParamMismatch(format!("bad `{k}`")))
        };
        let mut model = LkhgtModel::new(config, parse("num_entities")?, parse("num_relations")?)?;
        model.replace_params(ck.params)?;
        Ok((model, ck.meta))
    }

    /// Zeroes every type-bias table and copies the first type's query, key
    /// and value maps onto the other types, leaving plain attention.
    pub fn reduce_to_vanilla(&mut self) {
        for stack in [&self.ids.projection, &self.ids.logical] {
            for layer in &stack.layers {
                for maps in [&layer.wq, &layer.wk, &layer.wv] {
                    let first = self.params.get(maps[0]).clone();
                    for &id in &maps[1..] {
                        *self.params.get_mut(id) = first.clone();
                    }
                }
                for x in self.params.get_mut(layer.bias).data_mut() {
                    *x = 0.0;
                }
            }
        }
    }

    /// Swaps in parameters with identical names and shapes.
    pub fn replace_params(&mut self, params: ParamStore) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "{} parameters, expected {}",
                params.len(),
                self.params.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.params.iter().zip(params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(ModelError::ParamMismatch(format!("`{b}` where `{a}` was expected")));
            }
        }
        self.params = params;
        Ok(())
    }
}

/// Token sequence of one atom.
#[derive(Debug, Clone)]
pub struct ProjectionTokens {
    pub x: Var,
    pub types: Vec<TokenType>,
    /// Hyperedge position of argument tokens; `None` for `n` and `r`.
    pub positions: Vec<Option<usize>>,
    /// Sequence index of the target token.
    pub target_index: usize,
}

/// One forward pass recorded on a tape.
pub struct Forward<'m> {
    pub tape: Tape<'m>,
    model: &'m LkhgtModel,
    dropout: Option<Rng>,
    pub stats: ExecStats,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m LkhgtModel) -> Self {
        Forward {
            tape: Tape::new(&model.params),
            model,
            dropout: None,
            stats: ExecStats::default(),
        }
    }

    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(id)
    }

    /// Builds `[n] r a_1 ... a_k` through the per-type input maps, adding
    /// positional encodings to argument tokens. `free` selects the `y` type
    /// for the target token instead of `x`.
    pub fn projection_tokens(
        &mut self,
        atom: &QueryNode,
        children: &HashMap<usize, Var>,
        free: bool,
    ) -> Result<ProjectionTokens, ModelError> {
        let QueryNode::Projection {
            relation,
            args,
            negated,
        } = atom
        else {
            return Err(ModelError::NoTarget);
        };
        let ids = &self.model.ids;
        let mut raw = Vec::new();
        let mut types = Vec::new();
        let mut positions = Vec::new();
        if *negated {
            raw.push(self.tape.param(ids.negation));
            types.push(TokenType::Negation);
            positions.push(None);
        }
        let rel_table = self.tape.param(ids.relation);
        raw.push(self.tape.gather_rows(rel_table, &[relation.index()])?);
        types.push(TokenType::Relation);
        positions.push(None);
        let mut target_index = None;
        let ent_table = self.tape.param(ids.entity);
        for (pos, arg) in args.iter().enumerate() {
            match arg {
                Arg::Const(e) => {
                    raw.push(self.tape.gather_rows(ent_table, &[e.index()])?);
                    types.push(TokenType::Entity);
                }
                Arg::Sub(_) => {
                    raw.push(*children.get(&pos).ok_or(ModelError::MissingChildEmbedding(pos))?);
                    types.push(TokenType::Existential);
                }
                Arg::Target => {
                    target_index = Some(types.len());
                    if free {
                        raw.push(self.tape.param(ids.placeholder_y));
                        types.push(TokenType::Free);
                    } else {
                        raw.push(self.tape.param(ids.placeholder_x));
                        types.push(TokenType::Existential);
                    }
                }
            }
            positions.push(Some(pos));
        }
        let target_index = target_index.ok_or(ModelError::NoTarget)?;
        let x = self.project_inputs(&raw, &types)?;
        let x = if self.model.config.positional == Positional::Sinusoidal {
            let d = self.model.config.d;
            let mut pe = Vec::with_capacity(types.len() * d);
            for p in &positions {
                match p {
                    Some(pos) => pe.extend(sinusoidal(*pos, d)),
                    None => pe.extend(std::iter::repeat_n(0.0, d)),
                }
            }
            let pe = self.tape.constant(Tensor::new(vec![types.len(), d], pe)?);
            self.tape.add(x, pe)?
        } else {
            x
        };
        Ok(ProjectionTokens {
            x,
            types,
            positions,
            target_index,
        })
    }

    fn project_inputs(&mut self, raw: &[Var], types: &[TokenType]) -> Result<Var, ModelError> {
        let stacked = self.tape.concat_rows(raw)?;
        let weights: Vec<Var> = self.model.ids.input.clone().into_iter().map(|id| self.p(id)).collect();
        let select: Vec<usize> = types.iter().map(|t| t.index()).collect();
        Ok(self.tape.typed_matmul(stacked, &weights, &select)?)
    }

    /// Runs the projection encoder on one atom and reads out the target token.
    pub fn encode_projection(
        &mut self,
        atom: &QueryNode,
        children: &HashMap<usize, Var>,
        free: bool,
    ) -> Result<Var, ModelError> {
        let tokens = self.projection_tokens(atom, children, free)?;
        let out = self.run_stack(tokens.x, &tokens.types, Stack::Projection)?;
        self.stats.projection_calls += 1;
        Ok(self.tape.gather_rows(out, &[tokens.target_index])?)
    }

    /// Logical encoder over child embeddings, read out at the operator token.
    pub fn encode_logical(&mut self, op: LogicalOp, children: &[Var]) -> Result<Var, ModelError> {
        if children.len() < 2 {
            return Err(ModelError::TooFewChildren(children.len()));
        }
        self.stats.logical_calls += 1;
        match self.model.config.cardinality {
            Cardinality::Variadic => self.logical_pass(op, children),
            Cardinality::Pairwise => {
                let mut acc = self.logical_pass(op, &children[..2])?;
                for &c in &children[2..] {
                    acc = self.logical_pass(op, &[acc, c])?;
                }
                Ok(acc)
            }
        }
    }

    fn logical_pass(&mut self, op: LogicalOp, children: &[Var]) -> Result<Var, ModelError> {
        let (token, ty) = match op {
            LogicalOp::Intersection => (self.model.ids.op_i, TokenType::Intersection),
            LogicalOp::Union => (self.model.ids.op_u, TokenType::Union),
        };
        let mut raw = vec![self.p(token)];
        raw.extend_from_slice(children);
        let mut types = vec![ty];
        types.extend(std::iter::repeat_n(TokenType::Projected, children.len()));
        let x = self.project_inputs(&raw, &types)?;
        let out = self.run_stack(x, &types, Stack::Logical)?;
        self.stats.logical_passes += 1;
        Ok(self.tape.gather_rows(out, &[0])?)
    }

    /// Product t-norm (intersection) or t-conorm (union) in sigmoid space.
    pub fn fuzzy_logical(&mut self, op: LogicalOp, children: &[Var]) -> Result<Var, ModelError> {
        if children.len() < 2 {
            return Err(ModelError::TooFewChildren(children.len()));
        }
        self.stats.logical_calls += 1;
        let squashed: Vec<Var> = children.iter().map(|&c| self.tape.sigmoid(c)).collect();
        let combined = match op {
            LogicalOp::Intersection => {
                let mut acc = squashed[0];
                for &s in &squashed[1..] {
                    acc = self.tape.mul(acc, s)?;
                }
                acc
            }
            LogicalOp::Union => {
                let mut acc = self.tape.affine(squashed[0], -1.0, 1.0);
                for &s in &squashed[1..] {
                    let c = self.tape.affine(s, -1.0, 1.0);
                    acc = self.tape.mul(acc, c)?;
                }
                self.tape.affine(acc, -1.0, 1.0)
            }
        };
        let clamped = self.tape.clamp(combined, FUZZY_EPS, 1.0 - FUZZY_EPS);
        Ok(self.tape.logit(clamped))
    }

    /// Post-order execution; returns the root answer embedding (`1×d`).
    pub fn execute(&mut self, tree: &QueryNode) -> Result<Var, ModelError> {
        self.node(tree, true)
    }

    fn node(&mut self, node: &QueryNode, free: bool) -> Result<Var, ModelError> {
        match node {
            QueryNode::Projection { args, .. } => {
                let mut children = HashMap::new();
                for (pos, arg) in args.iter().enumerate() {
                    if let Arg::Sub(child) = arg {
                        let v = self.node(child, false)?;
                        children.insert(pos, v);
                    }
                }
                self.encode_projection(node, &children, free)
            }
            QueryNode::Intersection(cs) | QueryNode::Union(cs) => {
                let op = if matches!(node, QueryNode::Intersection(_)) {
                    LogicalOp::Intersection
                } else {
                    LogicalOp::Union
                };
                let vs = cs
                    .iter()
                    .map(|c| self.node(c, free))
                    .collect::<Result<Vec<_>, _>>()?;
                match self.model.config.logical {
                    LogicalMode::TabEncoder => self.encode_logical(op, &vs),
                    LogicalMode::Fuzzy => self.fuzzy_logical(op, &vs),
                }
            }
        }
    }

    /// Logits over all entities for a `1×d` embedding.
    pub fn decode(&mut self, z: Var) -> Result<Var, ModelError> {
        let ids = &self.model.ids;
        match self.model.config.decoder {
            DecoderMode::Mlp => {
                let (w1, b1, w2, b2) = (ids.dec1.0, ids.dec1.1, ids.dec2.0, ids.dec2.1);
                let (w1, b1, w2, b2) = (self.p(w1), self.p(b1), self.p(w2), self.p(b2));
                let h = self.tape.matmul(z, w1)?;
                let h = self.tape.add_row(h, b1)?;
                let h = self.tape.gelu(h);
                let o = self.tape.matmul(h, w2)?;
                Ok(self.tape.add_row(o, b2)?)
            }
            DecoderMode::Tied => {
                let table = self.p(ids.entity);
                let t = self.tape.transpose(table);
                Ok(self.tape.matmul(z, t)?)
            }
        }
    }

    fn run_stack(&mut self, mut x: Var, types: &[TokenType], which: Stack) -> Result<Var, ModelError> {
        for layer in 0..self.model.config.layers {
            x = self.block(x, types, which, layer)?;
        }
        let (g, b) = self.model.stack(which).final_ln;
        self.norm(x, g, b)
    }

    fn norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Result<Var, ModelError> {
        let (g, b) = (self.p(gain), self.p(bias));
        let n = self.tape.layer_norm(x, LN_EPS);
        let n = self.tape.mul_row(n, g)?;
        Ok(self.tape.add_row(n, b)?)
    }

    fn maybe_dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let rate = self.model.config.dropout;
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.value(x).shape().to_vec();
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        Ok(self.tape.mul(x, m)?)
    }

    /// Pre-norm encoder block: type-aware attention and a feed-forward
    /// sublayer, each with a residual connection.
    pub fn block(&mut self, x: Var, types: &[TokenType], which: Stack, layer: usize) -> Result<Var, ModelError> {
        let ids = self.model.stack(which).layers[layer].clone();
        let h = self.norm(x, ids.ln1.0, ids.ln1.1)?;
        let (att, _) = self.tab_attention(h, types, which, layer)?;
        let att = self.maybe_dropout(att)?;
        let x = self.tape.add(x, att)?;
        let h = self.norm(x, ids.ln2.0, ids.ln2.1)?;
        let (w1, b1, w2, b2) = (self.p(ids.ff1.0), self.p(ids.ff1.1), self.p(ids.ff2.0), self.p(ids.ff2.1));
        let f = self.tape.matmul(h, w1)?;
        let f = self.tape.add_row(f, b1)?;
        let f = self.tape.gelu(f);
        let f = self.tape.matmul(f, w2)?;
        let f = self.tape.add_row(f, b2)?;
        let f = self.maybe_dropout(f)?;
        Ok(self.tape.add(x, f)?)
    }

    /// Multi-head attention with type-selected projections and the pairwise
    /// type bias added to every key. Returns the output (after the output
    /// map) and the per-head attention matrices.
    pub fn tab_attention(
        &mut self,
        h: Var,
        types: &[TokenType],
        which: Stack,
        layer: usize,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let n = self.tape.value(h).rows();
        if n != types.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tab_attention",
                left: self.tape.value(h).shape().to_vec(),
                right: vec![types.len()],
            }
            .into());
        }
        let stack = self.model.stack(which);
        let ids = stack.layers[layer].clone();
        let select = types
            .iter()
            .map(|&t| stack.local(t))
            .collect::<Result<Vec<_>, _>>()?;
        let d = self.model.config.d;
        let heads = self.model.config.heads;
        let dh = d / heads;
        let wq: Vec<Var> = ids.wq.iter().map(|&i| self.p(i)).collect();
        let wk: Vec<Var> = ids.wk.iter().map(|&i| self.p(i)).collect();
        let wv: Vec<Var> = ids.wv.iter().map(|&i| self.p(i)).collect();
        let q = self.tape.typed_matmul(h, &wq, &select)?;
        let k = self.tape.typed_matmul(h, &wk, &select)?;
        let v = self.tape.typed_matmul(h, &wv, &select)?;
        let pair: Vec<usize> = types
            .iter()
            .flat_map(|a| types.iter().map(move |b| a.index() * 8 + b.index()))
            .collect();
        let bias_table = self.p(ids.bias);
        let bias = self.tape.gather_rows(bias_table, &pair)?;
        let rows_i: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let rows_j: Vec<usize> = (0..n).flat_map(|_| 0..n).collect();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (qh, kh, vh, bh) = if heads == 1 {
                (q, k, v, bias)
            } else {
                (
                    self.tape.slice_cols(q, hd * dh, dh)?,
                    self.tape.slice_cols(k, hd * dh, dh)?,
                    self.tape.slice_cols(v, hd * dh, dh)?,
                    self.tape.slice_cols(bias, hd * dh, dh)?,
                )
            };
            let keys = self.tape.gather_rows(kh, &rows_j)?;
            let keys = self.tape.add(keys, bh)?;
            let queries = self.tape.gather_rows(qh, &rows_i)?;
            let prod = self.tape.mul(queries, keys)?;
            let scores = self.tape.sum_cols(prod);
            let scores = self.tape.reshape(scores, &[n, n])?;
            let scores = self.tape.scale(scores, inv_sqrt);
            let a = self.tape.softmax_rows(scores);
            outs.push(self.tape.matmul(a, vh)?);
            weights.push(a);
        }
        let z = if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs)? };
        let wo = self.p(ids.wo);
        Ok((self.tape.matmul(z, wo)?, weights))
    }
}

#[cfg(test)]
mod tests;
