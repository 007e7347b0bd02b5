//! Prints the per-head attention pattern of the first projection layer for
//! one 3-ary atom, then the same pattern with the bias table zeroed.

use std::collections::HashMap;

use hypercqa::model::{Forward, LkhgtModel, ModelConfig, Stack};
use hypercqa::{Arg, EntityId, QueryNode, RelationId};

fn show(model: &LkhgtModel, atom: &QueryNode) {
    let mut f = Forward::new(model);
    let tokens = f.projection_tokens(atom, &HashMap::new(), true).unwrap();
    let (_, heads) = f.tab_attention(tokens.x, &tokens.types, Stack::Projection, 0).unwrap();
    let labels: String = tokens.types.iter().map(|t| t.symbol()).collect();
    for (h, w) in heads.iter().enumerate() {
        println!("head {h} ({labels})");
        let a = f.tape.value(*w);
        for r in 0..a.rows() {
            let row: Vec<String> = a.row_slice(r).iter().map(|x| format!("{x:.3}")).collect();
            println!("  {}  {}", tokens.types[r].symbol(), row.join(" "));
        }
    }
}

fn main() {
    let config = ModelConfig {
        d: 16,
        heads: 2,
        layers: 1,
        ..ModelConfig::desk()
    };
    let mut model = LkhgtModel::new(config, 10, 2).unwrap();
    let atom = QueryNode::Projection {
        relation: RelationId(1),
        args: vec![Arg::Const(EntityId(3)), Arg::Target, Arg::Const(EntityId(7))],
        negated: true,
    };
    show(&model, &atom);
    println!("-- bias removed, shared projections --");
    model.reduce_to_vanilla();
    show(&model, &atom);
}
