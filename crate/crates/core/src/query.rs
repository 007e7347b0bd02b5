//! EFO-1 queries as operator trees.
//!
//! A query is a tree of projections (one atomic formula each, optionally
//! negated), intersections and unions. Variables are implicit: a `Sub` argument
//! carries the answers of its child tree, and `Target` marks the variable the
//! projection produces.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::khg::{EntityId, RelationId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arg {
    Const(EntityId),
    Sub(Box<QueryNode>),
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryNode {
    Projection {
        relation: RelationId,
        args: Vec<Arg>,
        negated: bool,
    },
    Intersection(Vec<QueryNode>),
    Union(Vec<QueryNode>),
}

impl QueryNode {
    /// Number of operator nodes; negation lives inside its projection.
    pub fn node_count(&self) -> usize {
        match self {
            QueryNode::Projection { args, .. } => {
                1 + args
                    .iter()
                    .map(|a| match a {
                        Arg::Sub(child) => child.node_count(),
                        _ => 0,
                    })
                    .sum::<usize>()
            }
            QueryNode::Intersection(children) | QueryNode::Union(children) => {
                1 + children.iter().map(QueryNode::node_count).sum::<usize>()
            }
        }
    }

    pub fn is_negated(&self) -> bool {
        matches!(self, QueryNode::Projection { negated: true, .. })
    }

    /// Target slot of a projection node.
    pub fn target_position(&self) -> Option<usize> {
        match self {
            QueryNode::Projection { args, .. } => args.iter().position(|a| matches!(a, Arg::Target)),
            _ => None,
        }
    }

    /// Projections in pre-order (node, then args / children left to right).
    pub fn projections(&self) -> Vec<&QueryNode> {
        let mut out = Vec::new();
        self.walk_projections(&mut out);
        out
    }

    fn walk_projections<'a>(&'a self, out: &mut Vec<&'a QueryNode>) {
        match self {
            QueryNode::Projection { args, .. } => {
                out.push(self);
                for a in args {
                    if let Arg::Sub(child) = a {
                        child.walk_projections(out);
                    }
                }
            }
            QueryNode::Intersection(children) | QueryNode::Union(children) => {
                for c in children {
                    c.walk_projections(out);
                }
            }
        }
    }

    /// Checks the tree against the vocabulary; returns every violation found.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        self.check(vocab, Parent::Root, &mut violations);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    fn check(&self, vocab: &Vocabulary, parent: Parent, out: &mut Vec<Violation>) {
        match self {
            QueryNode::Projection {
                relation,
                args,
                negated,
            } => {
                match vocab.relation(*relation) {
                    None => out.push(Violation::UnknownRelation(*relation)),
                    Some(info) if info.arity != args.len() => out.push(Violation::ArityMismatch {
                        relation: *relation,
                        expected: info.arity,
                        found: args.len(),
                    }),
                    Some(_) => {}
                }
                let targets = args.iter().filter(|a| matches!(a, Arg::Target)).count();
                if targets != 1 {
                    out.push(Violation::TargetCount(targets));
                }
                for a in args {
                    match a {
                        Arg::Const(e) if e.index() >= vocab.num_entities() => {
                            out.push(Violation::UnknownEntity(*e))
                        }
                        Arg::Sub(child) => child.check(vocab, Parent::Projection, out),
                        _ => {}
                    }
                }
                if *negated && parent != Parent::Intersection {
                    out.push(Violation::UnboundedComplement);
                }
            }
            QueryNode::Intersection(children) => {
                if children.len() < 2 {
                    out.push(Violation::TooFewChildren(children.len()));
                }
                if !children.is_empty() && children.iter().all(QueryNode::is_negated) {
                    out.push(Violation::UnboundedComplement);
                }
                for c in children {
                    c.check(vocab, Parent::Intersection, out);
                }
            }
            QueryNode::Union(children) => {
                if children.len() < 2 {
                    out.push(Violation::TooFewChildren(children.len()));
                }
                for c in children {
                    c.check(vocab, Parent::Union, out);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Parent {
    Root,
    Projection,
    Intersection,
    Union,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("projection has {0} target arguments, expected exactly one")]
    TargetCount(usize),
    #[error("relation {relation} has arity {expected} but projection has {found} arguments")]
    ArityMismatch {
        relation: RelationId,
        expected: usize,
        found: usize,
    },
    #[error("unknown relation {0}")]
    UnknownRelation(RelationId),
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("logical operator with {0} children, expected at least 2")]
    TooFewChildren(usize),
    #[error("unbounded complement")]
    UnboundedComplement,
}

/// The fourteen benchmark query types, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryType {
    #[serde(rename = "1P")]
    P1,
    #[serde(rename = "2P")]
    P2,
    #[serde(rename = "3P")]
    P3,
    #[serde(rename = "2I")]
    I2,
    #[serde(rename = "3I")]
    I3,
    #[serde(rename = "PI")]
    Pi,
    #[serde(rename = "IP")]
    Ip,
    #[serde(rename = "2U")]
    U2,
    #[serde(rename = "UP")]
    Up,
    #[serde(rename = "2IN")]
    In2,
    #[serde(rename = "3IN")]
    In3,
    #[serde(rename = "INP")]
    Inp,
    #[serde(rename = "PIN")]
    Pin,
    #[serde(rename = "PNI")]
    Pni,
}

impl QueryType {
    pub const ALL: [QueryType; 14] = [
        QueryType::P1,
        QueryType::P2,
        QueryType::P3,
        QueryType::I2,
        QueryType::I3,
        QueryType::Pi,
        QueryType::Ip,
        QueryType::U2,
        QueryType::Up,
        QueryType::In2,
        QueryType::In3,
        QueryType::Inp,
        QueryType::Pin,
        QueryType::Pni,
    ];

    /// Types held out of training in the out-of-distribution setting.
    pub const OOD_HELD_OUT: [QueryType; 4] =
        [QueryType::P3, QueryType::In3, QueryType::I3, QueryType::Inp];

    pub fn name(self) -> &'static str {
        match self {
            QueryType::P1 => "1P",
            QueryType::P2 => "2P",
            QueryType::P3 => "3P",
            QueryType::I2 => "2I",
            QueryType::I3 => "3I",
            QueryType::Pi => "PI",
            QueryType::Ip => "IP",
            QueryType::U2 => "2U",
            QueryType::Up => "UP",
            QueryType::In2 => "2IN",
            QueryType::In3 => "3IN",
            QueryType::Inp => "INP",
            QueryType::Pin => "PIN",
            QueryType::Pni => "PNI",
        }
    }

    pub fn has_negation(self) -> bool {
        matches!(
            self,
            QueryType::In2 | QueryType::In3 | QueryType::Inp | QueryType::Pin | QueryType::Pni
        )
    }

    pub fn template(self) -> Shape {
        use Shape::{Intersection as I, Union as U};
        let p = Shape::p;
        let np = Shape::np;
        match self {
            QueryType::P1 => p(None),
            QueryType::P2 => p(Some(p(None))),
            QueryType::P3 => p(Some(p(Some(p(None))))),
            QueryType::I2 => I(vec![p(None), p(None)]),
            QueryType::I3 => I(vec![p(None), p(None), p(None)]),
            QueryType::Pi => I(vec![p(Some(p(None))), p(None)]),
            QueryType::Ip => p(Some(I(vec![p(None), p(None)]))),
            QueryType::U2 => U(vec![p(None), p(None)]),
            QueryType::Up => p(Some(U(vec![p(None), p(None)]))),
            QueryType::In2 => I(vec![p(None), np(None)]),
            QueryType::In3 => I(vec![p(None), p(None), np(None)]),
            QueryType::Inp => p(Some(I(vec![p(None), np(None)]))),
            QueryType::Pin => I(vec![p(Some(p(None))), np(None)]),
            QueryType::Pni => I(vec![np(Some(p(None))), p(None)]),
        }
    }

    /// Classifies a grounded tree by its shape.
    pub fn of(tree: &QueryNode) -> Option<QueryType> {
        let shape = Shape::of(tree);
        QueryType::ALL.into_iter().find(|t| t.template() == shape)
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown query type `{0}`")]
pub struct UnknownQueryType(pub String);

impl FromStr for QueryType {
    type Err = UnknownQueryType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        QueryType::ALL
            .into_iter()
            .find(|t| t.name() == upper)
            .ok_or_else(|| UnknownQueryType(s.to_string()))
    }
}

/// Looks up the shape for a type name such as `"PNI"`.
pub fn template(name: &str) -> Result<Shape, UnknownQueryType> {
    name.parse::<QueryType>().map(QueryType::template)
}

/// Ungrounded tree shape. A projection's `child` feeds one of its argument slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Projection {
        negated: bool,
        child: Option<Box<Shape>>,
    },
    Intersection(Vec<Shape>),
    Union(Vec<Shape>),
}

impl Shape {
    fn p(child: Option<Shape>) -> Shape {
        Shape::Projection {
            negated: false,
            child: child.map(Box::new),
        }
    }

    fn np(child: Option<Shape>) -> Shape {
        Shape::Projection {
            negated: true,
            child: child.map(Box::new),
        }
    }

    /// Forgets the grounding. Projections with several `Sub` slots keep only the first.
    pub fn of(tree: &QueryNode) -> Shape {
        match tree {
            QueryNode::Projection { args, negated, .. } => Shape::Projection {
                negated: *negated,
                child: args.iter().find_map(|a| match a {
                    Arg::Sub(c) => Some(Box::new(Shape::of(c))),
                    _ => None,
                }),
            },
            QueryNode::Intersection(cs) => Shape::Intersection(cs.iter().map(Shape::of).collect()),
            QueryNode::Union(cs) => Shape::Union(cs.iter().map(Shape::of).collect()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Shape::Projection { child, .. } => 1 + child.as_ref().map_or(0, |c| c.node_count()),
            Shape::Intersection(cs) | Shape::Union(cs) => {
                1 + cs.iter().map(Shape::node_count).sum::<usize>()
            }
        }
    }
}

/// A grounded query with its answers split into easy and hard sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInstance {
    #[serde(rename = "type")]
    pub qtype: QueryType,
    pub tree: QueryNode,
    pub easy: BTreeSet<EntityId>,
    pub hard: BTreeSet<EntityId>,
}

impl QueryInstance {
    /// Easy and hard answers together.
    pub fn answers(&self) -> BTreeSet<EntityId> {
        self.easy.union(&self.hard).copied().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("query instances always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// One JSON object per line.
pub fn to_jsonl(instances: &[QueryInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&inst.to_json());
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<QueryInstance>, ParseError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: QueryInstance = serde_json::from_str(line).map_err(|e| ParseError {
            line: no + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        if !inst.easy.is_disjoint(&inst.hard) {
            return Err(ParseError {
                line: no + 1,
                column: 0,
                message: "easy and hard answers overlap".into(),
            });
        }
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::khg::KnowledgeHypergraph;

    fn vocab() -> Vocabulary {
        KnowledgeHypergraph::parse_facts("r\ta\tb\tc\ns\ta\tb\n")
            .unwrap()
            .vocab()
            .clone()
    }

    fn p(rel: u32, args: Vec<Arg>, negated: bool) -> QueryNode {
        QueryNode::Projection {
            relation: RelationId(rel),
            args,
            negated,
        }
    }

    fn c(e: u32) -> Arg {
        Arg::Const(EntityId(e))
    }

    #[test]
    fn template_lookup() {
        assert_eq!(
            template("1P").unwrap(),
            Shape::Projection {
                negated: false,
                child: None
            }
        );
        let pni = template("PNI").unwrap();
        let Shape::Intersection(children) = &pni else {
            panic!("PNI is an intersection")
        };
        assert!(matches!(&children[0], Shape::Projection { negated: true, child: Some(_) }));
        assert!(matches!(&children[1], Shape::Projection { negated: false, child: None }));
        assert_eq!(template("4P"), Err(UnknownQueryType("4P".into())));
        assert_eq!(template("pin").unwrap(), QueryType::Pin.template());
    }

    #[test]
    fn template_node_counts() {
        let expected = [1, 2, 3, 3, 4, 4, 4, 3, 4, 3, 4, 4, 4, 4];
        for (t, n) in QueryType::ALL.into_iter().zip(expected) {
            assert_eq!(t.template().node_count(), n, "{t}");
        }
    }

    #[test]
    fn names_round_trip() {
        for t in QueryType::ALL {
            assert_eq!(t.name().parse::<QueryType>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
        assert_eq!(QueryType::ALL.iter().filter(|t| t.has_negation()).count(), 5);
    }

    #[test]
    fn validate_accepts_1p() {
        let tree = p(0, vec![c(0), c(1), Arg::Target], false);
        assert_eq!(tree.validate(&vocab()), Ok(()));
        assert_eq!(tree.node_count(), 1);
    }

    #[test]
    fn validate_rejects_all_negated_intersection() {
        let tree = QueryNode::Intersection(vec![
            p(1, vec![c(0), Arg::Target], true),
            p(1, vec![c(1), Arg::Target], true),
        ]);
        let v = tree.validate(&vocab()).unwrap_err();
        assert!(v.contains(&Violation::UnboundedComplement));
        assert_eq!(Violation::UnboundedComplement.to_string(), "unbounded complement");
    }

    #[test]
    fn validate_rejects_two_targets_and_bad_arity() {
        let tree = p(1, vec![Arg::Target, Arg::Target], false);
        assert_eq!(tree.validate(&vocab()), Err(vec![Violation::TargetCount(2)]));
        let tree = p(1, vec![c(0), c(1), Arg::Target], false);
        assert!(matches!(
            tree.validate(&vocab()).unwrap_err()[0],
            Violation::ArityMismatch { expected: 2, found: 3, .. }
        ));
    }

    #[test]
    fn validate_rejects_negation_outside_intersection() {
        let tree = p(1, vec![c(0), Arg::Target], true);
        assert_eq!(tree.validate(&vocab()), Err(vec![Violation::UnboundedComplement]));
        let tree = QueryNode::Union(vec![
            p(1, vec![c(0), Arg::Target], false),
            p(1, vec![c(1), Arg::Target], true),
        ]);
        assert_eq!(tree.validate(&vocab()), Err(vec![Violation::UnboundedComplement]));
    }

    #[test]
    fn node_count_chains() {
        let ip = p(
            1,
            vec![
                Arg::Sub(Box::new(QueryNode::Intersection(vec![
                    p(1, vec![c(0), Arg::Target], false),
                    p(1, vec![c(1), Arg::Target], false),
                ]))),
                Arg::Target,
            ],
            false,
        );
        assert_eq!(ip.node_count(), 4);
        assert_eq!(QueryType::of(&ip), Some(QueryType::Ip));

        let pni = QueryNode::Intersection(vec![
            p(1, vec![Arg::Sub(Box::new(p(1, vec![c(0), Arg::Target], false))), Arg::Target], true),
            p(1, vec![c(1), Arg::Target], false),
        ]);
        assert_eq!(pni.node_count(), 4);
        assert_eq!(QueryType::of(&pni), Some(QueryType::Pni));
        assert_eq!(pni.validate(&vocab()), Ok(()));
    }

    #[test]
    fn serialize_round_trip_is_canonical() {
        let inst = QueryInstance {
            qtype: QueryType::P1,
            tree: p(0, vec![c(0), c(1), Arg::Target], false),
            easy: BTreeSet::new(),
            hard: [EntityId(2)].into_iter().collect(),
        };
        let line = inst.to_json();
        assert_eq!(
            line,
            r#"{"type":"1P","tree":{"projection":{"relation":0,"args":[{"const":0},{"const":1},"target"],"negated":false}},"easy":[],"hard":[2]}"#
        );
        let back = parse_jsonl(&line).unwrap();
        assert_eq!(back, vec![inst]);
        assert_eq!(back[0].to_json(), line);
    }

    #[test]
    fn truncated_line_is_a_parse_error() {
        let inst = QueryInstance {
            qtype: QueryType::P1,
            tree: p(0, vec![c(0), c(1), Arg::Target], false),
            easy: BTreeSet::new(),
            hard: BTreeSet::new(),
        };
        let good = inst.to_json();
        let text = format!("{good}\n{}\n", &good[..good.len() / 2]);
        let err = parse_jsonl(&text).unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn negation_flag_serialized_once_for_2in() {
        let inst = QueryInstance {
            qtype: QueryType::In2,
            tree: QueryNode::Intersection(vec![
                p(1, vec![c(0), Arg::Target], false),
                p(1, vec![c(1), Arg::Target], true),
            ]),
            easy: BTreeSet::new(),
            hard: [EntityId(1)].into_iter().collect(),
        };
        let line = inst.to_json();
        assert_eq!(line.matches("\"negated\":true").count(), 1);
        assert_eq!(line.matches("\"negated\":false").count(), 1);
    }
}
