//! Loads a handful of n-ary facts and runs one-hop pattern matches.

use hypercqa::KnowledgeHypergraph;

const FACTS: &str = "\
coauthor\talice\tbob\tcarol
coauthor\talice\tdave\tcarol
coauthor\terin\tbob\tfrank
advises\tcarol\talice
advises\tcarol\tdave
";

fn main() {
    let graph = KnowledgeHypergraph::parse_facts(FACTS).expect("valid facts");
    print!("{}", graph.stats().to_tsv());

    let vocab = graph.vocab();
    let coauthor = vocab.relation_id("coauthor").unwrap();
    let alice = vocab.entity_id("alice").unwrap();
    let carol = vocab.entity_id("carol").unwrap();

    // second author of every paper alice wrote first with carol last
    let middle = graph.match_pattern(coauthor, &[(0, alice), (2, carol)], 1).unwrap();
    let names: Vec<&str> = middle.iter().map(|&e| vocab.entity_name(e).unwrap()).collect();
    println!("coauthor(alice, ?, carol) = {names:?}");

    for &(edge, pos) in graph.incident(carol).unwrap() {
        let h = graph.edge(edge);
        let rel = &vocab.relation(h.relation).unwrap().name;
        println!("carol at position {pos} of {rel}{:?}", h.entities);
    }
}
