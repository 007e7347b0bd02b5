//! Complex query answering over ordered knowledge hypergraphs.
//!
//! The crate covers the whole loop at desk scale:
//!
//! - [`khg`]: an indexed store of ordered n-ary facts.
//! - [`query`]: EFO-1 operator trees and the fourteen benchmark query types.
//! - [`sampler`] / [`dataset`]: grounding query shapes and labelling easy/hard answers.
//! - [`oracle`]: exact symbolic answering, the ground truth for everything else.
//! - [`tensor`]: a small reverse-mode tensor engine with Adam and checkpoints.
//! - [`model`]: the two-stage transformer with type-aware attention bias.
//! - [`baseline`]: closed-form hypergraph logical messages over product-form embeddings.
//! - [`eval`]: filtered MRR, per-type reports and the ablation runner.
//! - [`cli`]: the command implementations behind the `hypercqa` binary.

pub mod baseline;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod khg;
pub mod model;
pub mod oracle;
pub mod query;
pub mod sampler;
pub mod seeding;
pub mod synthetic;
pub mod tensor;

pub use khg::{EntityId, GraphSplits, Hyperedge, KnowledgeHypergraph, RelationId};
pub use query::{Arg, QueryInstance, QueryNode, QueryType, Shape};
