//! Filtered reciprocal rank on hand-written score vectors.

use std::collections::BTreeSet;

use hypercqa::eval::{filtered_mrr, filtered_ranks};
use hypercqa::EntityId;

fn set(ids: &[u32]) -> BTreeSet<EntityId> {
    ids.iter().map(|&i| EntityId(i)).collect()
}

fn main() {
    let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
    let easy = set(&[0]);
    let hard = set(&[2, 4]);
    for filter_hard in [false, true] {
        let ranks = filtered_ranks(&scores, &easy, &hard, filter_hard).unwrap();
        let mrr = filtered_mrr(&scores, &easy, &hard, filter_hard).unwrap();
        println!("filter_hard={filter_hard}\tranks {ranks:?}\tmrr {mrr:.4}");
    }
}
