//! Saves a model, reloads it and checks the scores survive bit for bit.

use std::collections::BTreeMap;

use hypercqa::model::{LkhgtModel, ModelConfig};
use hypercqa::{Arg, EntityId, QueryNode, RelationId};

fn main() {
    let config = ModelConfig {
        d: 16,
        heads: 2,
        ..ModelConfig::desk()
    };
    let model = LkhgtModel::new(config, 20, 3).unwrap();
    let tree = QueryNode::Projection {
        relation: RelationId(2),
        args: vec![Arg::Const(EntityId(4)), Arg::Target],
        negated: false,
    };
    let dir = std::env::temp_dir().join("hypercqa-checkpoint-example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    let meta = BTreeMap::from([("note".to_string(), "example".to_string())]);
    model.save(&path, &meta).unwrap();
    let (back, meta) = LkhgtModel::load(&path).unwrap();
    let same = model.scores(&tree).unwrap() == back.scores(&tree).unwrap();
    println!(
        "{} bytes, {} params, meta keys {:?}, identical scores: {same}",
        std::fs::metadata(&path).unwrap().len(),
        back.params().num_scalars(),
        meta.keys().collect::<Vec<_>>()
    );
}
