//! Ordered knowledge hypergraph store.
//!
//! Facts are `relation(e_1, ..., e_k)` with a fixed arity per relation and
//! meaningful argument positions. The store is immutable once built and keeps
//! three indexes: by relation, by `(relation, position, entity)` and by entity.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("relation `{relation}` used with arity {found} but first seen with arity {expected} (line {line})")]
    ArityMismatch {
        relation: String,
        expected: usize,
        found: usize,
        line: usize,
    },
    #[error("no facts in input")]
    EmptyInput,
    #[error("line {line}: a fact needs a relation and at least one entity")]
    MalformedLine { line: usize },
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("unknown relation {0}")]
    UnknownRelation(RelationId),
    #[error("position {position} out of range for relation {relation} of arity {arity}")]
    PositionOutOfRange {
        relation: RelationId,
        position: usize,
        arity: usize,
    },
    #[error("target position {0} is also bound")]
    TargetBound(usize),
    #[error("splits are not nested: {0}")]
    NotNested(String),
}

/// One ordered fact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Hyperedge {
    pub relation: RelationId,
    pub entities: Vec<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationInfo {
    pub name: String,
    pub arity: usize,
}

/// Shared entity/relation vocabulary. Ids are handed out in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entity_names: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<RelationInfo>,
    relation_index: HashMap<String, RelationId>,
}

impl Vocabulary {
    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_name(&self, id: EntityId) -> Option<&str> {
        self.entity_names.get(id.index()).map(String::as_str)
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation(&self, id: RelationId) -> Option<&RelationInfo> {
        self.relations.get(id.index())
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn relations(&self) -> &[RelationInfo] {
        &self.relations
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        let id = EntityId(self.entity_names.len() as u32);
        self.entity_names.push(name.to_string());
        self.entity_index.insert(name.to_string(), id);
        id
    }

    /// Interns a relation, enforcing a single arity per name.
    pub fn intern_relation(
        &mut self,
        name: &str,
        arity: usize,
        line: usize,
    ) -> Result<RelationId, GraphError> {
        if let Some(&id) = self.relation_index.get(name) {
            let expected = self.relations[id.index()].arity;
            if expected != arity {
                return Err(GraphError::ArityMismatch {
                    relation: name.to_string(),
                    expected,
                    found: arity,
                    line,
                });
            }
            return Ok(id);
        }
        let id = RelationId(self.relations.len() as u32);
        self.relations.push(RelationInfo {
            name: name.to_string(),
            arity,
        });
        self.relation_index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Entity names one per line, followed by a blank line and `name\tarity` per relation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for name in &self.entity_names {
            out.push_str(name);
            out.push('\n');
        }
        out.push('\n');
        for rel in &self.relations {
            out.push_str(&format!("{}\t{}\n", rel.name, rel.arity));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut vocab = Vocabulary::default();
        let mut lines = text.lines().enumerate();
        for (_, line) in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            vocab.intern_entity(line);
        }
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (name, arity) = line
                .split_once('\t')
                .ok_or(GraphError::MalformedLine { line: no + 1 })?;
            let arity: usize = arity
                .trim()
                .parse()
                .map_err(|_| GraphError::MalformedLine { line: no + 1 })?;
            vocab.intern_relation(name, arity, no + 1)?;
        }
        Ok(vocab)
    }
}

/// Parses tab-separated facts into `(relation, entities)` id tuples, growing `vocab`.
fn parse_into(text: &str, vocab: &mut Vocabulary) -> Result<Vec<Hyperedge>, GraphError> {
    let mut edges = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let relation = fields.next().unwrap_or_default();
        let names: Vec<&str> = fields.collect();
        if relation.is_empty() || names.is_empty() || names.iter().any(|n| n.is_empty()) {
            return Err(GraphError::MalformedLine { line: no + 1 });
        }
        let rel = vocab.intern_relation(relation, names.len(), no + 1)?;
        let entities = names.iter().map(|n| vocab.intern_entity(n)).collect();
        edges.push(Hyperedge {
            relation: rel,
            entities,
        });
    }
    Ok(edges)
}

pub type EdgeId = usize;

#[derive(Debug, Clone)]
pub struct KnowledgeHypergraph {
    vocab: Vocabulary,
    edges: Vec<Hyperedge>,
    edge_set: HashSet<Hyperedge>,
    by_relation: Vec<Vec<EdgeId>>,
    by_slot: HashMap<(RelationId, usize, EntityId), Vec<EdgeId>>,
    by_entity: Vec<Vec<(EdgeId, usize)>>,
}

impl KnowledgeHypergraph {
    /// Parses a tab-separated fact listing: relation first, then entities.
    /// `#` lines and blank lines are skipped; duplicates collapse.
    pub fn parse_facts(text: &str) -> Result<Self, GraphError> {
        let mut vocab = Vocabulary::default();
        let edges = parse_into(text, &mut vocab)?;
        if edges.is_empty() {
            return Err(GraphError::EmptyInput);
        }
        Ok(Self::from_edges(vocab, edges))
    }

    /// Builds an indexed graph over a fixed vocabulary. Callers guarantee
    /// that every edge matches its relation's arity.
    pub fn from_edges(vocab: Vocabulary, edges: impl IntoIterator<Item = Hyperedge>) -> Self {
        let mut graph = KnowledgeHypergraph {
            by_relation: vec![Vec::new(); vocab.num_relations()],
            by_entity: vec![Vec::new(); vocab.num_entities()],
            vocab,
            edges: Vec::new(),
            edge_set: HashSet::new(),
            by_slot: HashMap::new(),
        };
        for edge in edges {
            debug_assert_eq!(
                edge.entities.len(),
                graph.vocab.relations[edge.relation.index()].arity
            );
            if graph.edge_set.contains(&edge) {
                continue;
            }
            let id = graph.edges.len();
            graph.by_relation[edge.relation.index()].push(id);
            for (pos, &e) in edge.entities.iter().enumerate() {
                graph
                    .by_slot
                    .entry((edge.relation, pos, e))
                    .or_default()
                    .push(id);
                graph.by_entity[e.index()].push((id, pos));
            }
            graph.edge_set.insert(edge.clone());
            graph.edges.push(edge);
        }
        graph
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_entities(&self) -> usize {
        self.vocab.num_entities()
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.num_relations()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Hyperedge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &Hyperedge {
        &self.edges[id]
    }

    pub fn contains(&self, edge: &Hyperedge) -> bool {
        self.edge_set.contains(edge)
    }

    pub fn arity(&self, relation: RelationId) -> Result<usize, GraphError> {
        self.vocab
            .relation(relation)
            .map(|r| r.arity)
            .ok_or(GraphError::UnknownRelation(relation))
    }

    pub fn relation_edges(&self, relation: RelationId) -> &[EdgeId] {
        self.by_relation
            .get(relation.index())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Every `(edge, position)` where `entity` occupies `position`; one pair per
    /// occupied slot, so self-loops are reported once per position.
    pub fn edges_containing(
        &self,
        entity: EntityId,
    ) -> Result<Vec<(&Hyperedge, usize)>, GraphError> {
        self.incident(entity)
            .map(|list| list.iter().map(|&(id, pos)| (&self.edges[id], pos)).collect())
    }

    /// Raw incidence list `(edge id, position)` for an entity.
    pub fn incident(&self, entity: EntityId) -> Result<&[(EdgeId, usize)], GraphError> {
        self.by_entity
            .get(entity.index())
            .map(Vec::as_slice)
            .ok_or(GraphError::UnknownEntity(entity))
    }

    pub fn degree(&self, entity: EntityId) -> usize {
        self.by_entity.get(entity.index()).map_or(0, Vec::len)
    }

    /// One-hop symbolic answering: the entities filling `target` in edges of
    /// `relation` that agree with every `(position, entity)` binding.
    pub fn match_pattern(
        &self,
        relation: RelationId,
        bindings: &[(usize, EntityId)],
        target: usize,
    ) -> Result<BTreeSet<EntityId>, GraphError> {
        let arity = self.arity(relation)?;
        for &(pos, _) in bindings {
            if pos >= arity {
                return Err(GraphError::PositionOutOfRange {
                    relation,
                    position: pos,
                    arity,
                });
            }
            if pos == target {
                return Err(GraphError::TargetBound(target));
            }
        }
        if target >= arity {
            return Err(GraphError::PositionOutOfRange {
                relation,
                position: target,
                arity,
            });
        }
        let candidates = self.narrowest(relation, bindings);
        Ok(candidates
            .iter()
            .map(|&id| &self.edges[id])
            .filter(|h| bindings.iter().all(|&(p, e)| h.entities[p] == e))
            .map(|h| h.entities[target])
            .collect())
    }

    /// Smallest candidate edge list for a relation given some fixed slots.
    pub(crate) fn narrowest(&self, relation: RelationId, bindings: &[(usize, EntityId)]) -> &[EdgeId] {
        let mut best = self.relation_edges(relation);
        for &(pos, e) in bindings {
            let list = self
                .by_slot
                .get(&(relation, pos, e))
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            if list.len() < best.len() {
                best = list;
            }
        }
        best
    }

    /// Facts in the input format, in edge order.
    pub fn to_facts_text(&self) -> String {
        let mut out = String::new();
        for h in &self.edges {
            out.push_str(&self.vocab.relations[h.relation.index()].name);
            for e in &h.entities {
                out.push('\t');
                out.push_str(&self.vocab.entity_names[e.index()]);
            }
            out.push('\n');
        }
        out
    }

    pub fn stats(&self) -> GraphStats {
        let mut arity_histogram = BTreeMap::new();
        for h in &self.edges {
            *arity_histogram.entry(h.entities.len()).or_insert(0) += 1;
        }
        GraphStats {
            entities: self.num_entities(),
            relations: self.num_relations(),
            edges: self.num_edges(),
            arity_histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphStats {
    pub entities: usize,
    pub relations: usize,
    pub edges: usize,
    /// arity → number of edges
    pub arity_histogram: BTreeMap<usize, usize>,
}

impl GraphStats {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("key\tvalue\n");
        out.push_str(&format!("entities\t{}\n", self.entities));
        out.push_str(&format!("relations\t{}\n", self.relations));
        out.push_str(&format!("edges\t{}\n", self.edges));
        for (arity, count) in &self.arity_histogram {
            out.push_str(&format!("arity_{arity}\t{count}\n"));
        }
        out
    }
}

/// Nested train ⊆ valid ⊆ test graphs over one vocabulary.
#[derive(Debug, Clone)]
pub struct GraphSplits {
    pub train: KnowledgeHypergraph,
    pub valid: KnowledgeHypergraph,
    pub test: KnowledgeHypergraph,
}

impl GraphSplits {
    /// Parses three fact listings (in train, valid, test order) into a shared vocabulary.
    pub fn parse(train: &str, valid: &str, test: &str) -> Result<Self, GraphError> {
        let mut vocab = Vocabulary::default();
        let tr = parse_into(train, &mut vocab)?;
        let va = parse_into(valid, &mut vocab)?;
        let te = parse_into(test, &mut vocab)?;
        if tr.is_empty() {
            return Err(GraphError::EmptyInput);
        }
        Self::new(
            KnowledgeHypergraph::from_edges(vocab.clone(), tr),
            KnowledgeHypergraph::from_edges(vocab.clone(), va),
            KnowledgeHypergraph::from_edges(vocab, te),
        )
    }

    /// Like [`parse`](Self::parse) but over a fixed vocabulary; names
    /// outside it are rejected so ids stay stable.
    pub fn parse_with(vocab: &Vocabulary, train: &str, valid: &str, test: &str) -> Result<Self, GraphError> {
        let mut grown = vocab.clone();
        let tr = parse_into(train, &mut grown)?;
        let va = parse_into(valid, &mut grown)?;
        let te = parse_into(test, &mut grown)?;
        if grown.num_entities() > vocab.num_entities() {
            return Err(GraphError::UnknownEntity(EntityId(vocab.num_entities() as u32)));
        }
        if grown.num_relations() > vocab.num_relations() {
            return Err(GraphError::UnknownRelation(RelationId(vocab.num_relations() as u32)));
        }
        if tr.is_empty() {
            return Err(GraphError::EmptyInput);
        }
        Self::new(
            KnowledgeHypergraph::from_edges(vocab.clone(), tr),
            KnowledgeHypergraph::from_edges(vocab.clone(), va),
            KnowledgeHypergraph::from_edges(vocab.clone(), te),
        )
    }

    pub fn new(
        train: KnowledgeHypergraph,
        valid: KnowledgeHypergraph,
        test: KnowledgeHypergraph,
    ) -> Result<Self, GraphError> {
        if train.vocab != valid.vocab || valid.vocab != test.vocab {
            return Err(GraphError::NotNested("vocabularies differ".into()));
        }
        if let Some(h) = train.edges.iter().find(|h| !valid.contains(h)) {
            return Err(GraphError::NotNested(format!("train edge {h:?} missing from valid")));
        }
        if let Some(h) = valid.edges.iter().find(|h| !test.contains(h)) {
            return Err(GraphError::NotNested(format!("valid edge {h:?} missing from test")));
        }
        Ok(GraphSplits { train, valid, test })
    }

    /// Derives nested splits from one full graph by shuffling its edges with
    /// `seed`: the first `train_fraction` go to train, the next `valid_fraction`
    /// are added for valid, and test is the full graph.
    pub fn holdout(
        full: &KnowledgeHypergraph,
        train_fraction: f64,
        valid_fraction: f64,
        seed: u64,
    ) -> Result<Self, GraphError> {
        let mut order: Vec<EdgeId> = (0..full.num_edges()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n = order.len();
        let n_train = ((n as f64) * train_fraction).round() as usize;
        let n_valid = (((n as f64) * (train_fraction + valid_fraction)).round() as usize).min(n);
        if n_train == 0 {
            return Err(GraphError::EmptyInput);
        }
        let pick = |k: usize| {
            let mut ids: Vec<EdgeId> = order[..k].to_vec();
            ids.sort_unstable();
            ids.into_iter().map(|id| full.edges[id].clone()).collect::<Vec<_>>()
        };
        Self::new(
            KnowledgeHypergraph::from_edges(full.vocab.clone(), pick(n_train)),
            KnowledgeHypergraph::from_edges(full.vocab.clone(), pick(n_valid)),
            full.clone(),
        )
    }
}
