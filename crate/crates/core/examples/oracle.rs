//! Answers hand-built operator trees exactly, including negation and a union
//! written as two conjunctive branches.

use hypercqa::oracle::{answers, answers_dnf};
use hypercqa::{Arg, KnowledgeHypergraph, QueryNode};

const FACTS: &str = "\
wrote\tana\tp1\tvenue_a
wrote\tben\tp2\tvenue_a
wrote\tana\tp3\tvenue_b
cites\tp2\tp1
cites\tp3\tp2
";

fn main() {
    let g = KnowledgeHypergraph::parse_facts(FACTS).unwrap();
    let v = g.vocab();
    let e = |n: &str| Arg::Const(v.entity_id(n).unwrap());
    let wrote = v.relation_id("wrote").unwrap();
    let cites = v.relation_id("cites").unwrap();
    let names = |s: &std::collections::BTreeSet<_>| -> Vec<String> {
        s.iter().map(|&x| v.entity_name(x).unwrap().to_string()).collect()
    };

    // papers by ana at venue_a or venue_b
    let at = |venue: &str, negated: bool| QueryNode::Projection {
        relation: wrote,
        args: vec![e("ana"), Arg::Target, e(venue)],
        negated,
    };
    println!("ana's papers: {:?}", names(&answers_dnf(&[at("venue_a", false), at("venue_b", false)], &g)));

    // papers citing something ana published at venue_a
    let hop = QueryNode::Projection {
        relation: cites,
        args: vec![Arg::Target, Arg::Sub(Box::new(at("venue_a", false)))],
        negated: false,
    };
    println!("cite ana@venue_a: {:?}", names(&answers(&hop, &g)));

    // ben's venue_a papers that ana did not write there
    let by_ben = QueryNode::Projection {
        relation: wrote,
        args: vec![e("ben"), Arg::Target, e("venue_a")],
        negated: false,
    };
    let tree = QueryNode::Intersection(vec![by_ben, at("venue_a", true)]);
    println!("ben@venue_a, not ana@venue_a: {:?}", names(&answers(&tree, &g)));
}
