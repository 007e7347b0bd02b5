use std::collections::HashMap;

use super::*;
use crate::khg::{KnowledgeHypergraph, RelationId};
use crate::query::QueryType;
use crate::sampler;
use crate::synthetic::{random_hypergraph, SyntheticSpec};

fn small(d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        d,
        heads,
        layers: 1,
        ..ModelConfig::desk()
    }
}

fn graph() -> KnowledgeHypergraph {
    random_hypergraph(&SyntheticSpec {
        entities: 30,
        arities: vec![2, 3, 4],
        edges: 120,
        seed: 5,
    })
}

fn grounded(t: QueryType, g: &KnowledgeHypergraph, seed: u64) -> (QueryNode, EntityId) {
    let mut rng = seeding::stream(seed, &[t.name().as_bytes()]);
    sampler::ground(&t.template(), g, &mut rng, 200).unwrap()
}

fn atom(args: Vec<Arg>, negated: bool) -> QueryNode {
    QueryNode::Projection {
        relation: RelationId(0),
        args,
        negated,
    }
}

fn random_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = seeding::stream(seed, &[b"rows"]);
    let data = (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

#[test]
fn token_layout_of_negated_atom() {
    let m = LkhgtModel::new(small(8, 2), 4, 1).unwrap();
    let mut f = Forward::new(&m);
    let a = atom(vec![Arg::Const(EntityId(1)), Arg::Target], true);
    let t = f.projection_tokens(&a, &HashMap::new(), true).unwrap();
    assert_eq!(
        t.types,
        vec![TokenType::Negation, TokenType::Relation, TokenType::Entity, TokenType::Free]
    );
    assert_eq!(t.positions, vec![None, None, Some(0), Some(1)]);
    assert_eq!(t.target_index, 3);
    let inner = f.projection_tokens(&a, &HashMap::new(), false).unwrap();
    assert_eq!(inner.types[3], TokenType::Existential);
}

#[test]
fn sub_slot_uses_the_child_vector() {
    let m = LkhgtModel::new(small(8, 2), 4, 1).unwrap();
    let mut f = Forward::new(&m);
    let child = atom(vec![Arg::Const(EntityId(0)), Arg::Target], false);
    let a = QueryNode::Projection {
        relation: RelationId(0),
        args: vec![Arg::Const(EntityId(2)), Arg::Sub(Box::new(child)), Arg::Target],
        negated: false,
    };
    assert!(matches!(
        f.projection_tokens(&a, &HashMap::new(), true),
        Err(ModelError::MissingChildEmbedding(1))
    ));
    let v = f.tape.constant(Tensor::row(vec![0.5; 8]));
    let t = f
        .projection_tokens(&a, &HashMap::from([(1, v)]), true)
        .unwrap();
    assert_eq!(
        t.types,
        vec![TokenType::Relation, TokenType::Entity, TokenType::Existential, TokenType::Free]
    );
}

#[test]
fn single_token_attends_to_itself() {
    let m = LkhgtModel::new(small(8, 2), 4, 1).unwrap();
    let mut f = Forward::new(&m);
    let x = f.tape.constant(random_rows(1, 8, 1));
    let (_, weights) = f
        .tab_attention(x, &[TokenType::Relation], Stack::Projection, 0)
        .unwrap();
    for w in weights {
        assert_eq!(f.tape.value(w).data(), &[1.0]);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let m = LkhgtModel::new(small(16, 4), 4, 1).unwrap();
    let types = [
        TokenType::Negation,
        TokenType::Relation,
        TokenType::Entity,
        TokenType::Existential,
        TokenType::Free,
    ];
    for seed in 0..10 {
        let mut f = Forward::new(&m);
        let x = f.tape.constant(random_rows(5, 16, seed));
        let (_, weights) = f.tab_attention(x, &types, Stack::Projection, 0).unwrap();
        for w in weights {
            let a = f.tape.value(w);
            for r in 0..a.rows() {
                let s: f64 = a.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn wrong_type_or_length_is_rejected() {
    let m = LkhgtModel::new(small(8, 2), 4, 1).unwrap();
    let mut f = Forward::new(&m);
    let x = f.tape.constant(random_rows(2, 8, 3));
    assert!(matches!(
        f.tab_attention(x, &[TokenType::Relation], Stack::Projection, 0),
        Err(ModelError::Tensor(TensorError::ShapeMismatch { .. }))
    ));
    assert!(matches!(
        f.tab_attention(x, &[TokenType::Union, TokenType::Projected], Stack::Projection, 0),
        Err(ModelError::TypeNotInStack(TokenType::Union))
    ));
}

#[test]
fn tied_unbiased_attention_is_vanilla() {
    let mut m = LkhgtModel::new(small(12, 3), 4, 1).unwrap();
    m.reduce_to_vanilla();
    let ids = m.ids.projection.layers[0].clone();
    let w = |id: ParamId| m.params.get(id).clone();
    let (wq, wk, wv, wo) = (w(ids.wq[0]), w(ids.wk[0]), w(ids.wv[0]), w(ids.wo));
    let types = [TokenType::Relation, TokenType::Entity, TokenType::Free, TokenType::Existential];
    let x = random_rows(4, 12, 9);
    let mut f = Forward::new(&m);
    let xv = f.tape.constant(x.clone());
    let (out, _) = f.tab_attention(xv, &types, Stack::Projection, 0).unwrap();
    let reference = vanilla(&x, &wq, &wk, &wv, &wo, 3);
    assert!(f.tape.value(out).max_abs_diff(&reference) < 1e-10);
}

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims();
    let m = b.cols();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

fn vanilla(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, heads: usize) -> Tensor {
    let (q, k, v) = (mm(x, wq), mm(x, wk), mm(x, wv));
    let (n, d) = q.dims();
    let dh = d / heads;
    let mut z = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let e: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = e.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = ex.iter().sum();
            for c in 0..dh {
                z[i * d + h * dh + c] = (0..n).map(|j| ex[j] / s * v.get(j, h * dh + c)).sum();
            }
        }
    }
    mm(&Tensor::new(vec![n, d], z).unwrap(), wo)
}

#[test]
fn logical_encoder_ignores_child_order_when_variadic() {
    let cfg = ModelConfig {
        cardinality: Cardinality::Variadic,
        ..small(16, 4)
    };
    let m = LkhgtModel::new(cfg, 4, 1).unwrap();
    let kids = random_rows(3, 16, 4);
    let run = |order: [usize; 3]| {
        let mut f = Forward::new(&m);
        let vs: Vec<Var> = order
            .iter()
            .map(|&i| f.tape.constant(Tensor::row(kids.row_slice(i).to_vec())))
            .collect();
        let z = f.encode_logical(LogicalOp::Union, &vs).unwrap();
        f.tape.value(z).clone()
    };
    let base = run([0, 1, 2]);
    assert!(run([2, 0, 1]).max_abs_diff(&base) < 1e-6);
    assert!(run([1, 2, 0]).max_abs_diff(&base) < 1e-6);
}

#[test]
fn pairwise_mode_folds_left() {
    let m = LkhgtModel::new(small(8, 2), 4, 1).unwrap();
    let kids = random_rows(3, 8, 6);
    let mut f = Forward::new(&m);
    let vs: Vec<Var> = (0..3)
        .map(|i| f.tape.constant(Tensor::row(kids.row_slice(i).to_vec())))
        .collect();
    let all = f.encode_logical(LogicalOp::Intersection, &vs).unwrap();
    let first = f.encode_logical(LogicalOp::Intersection, &vs[..2]).unwrap();
    let folded = f.encode_logical(LogicalOp::Intersection, &[first, vs[2]]).unwrap();
    assert_eq!(f.tape.value(all), f.tape.value(folded));
    assert_eq!(f.stats.logical_calls, 3);
    assert_eq!(f.stats.logical_passes, 4);
    assert!(matches!(
        f.encode_logical(LogicalOp::Union, &vs[..1]),
        Err(ModelError::TooFewChildren(1))
    ));
}

#[test]
fn fuzzy_connectives() {
    let m = LkhgtModel::new(small(4, 1), 4, 1).unwrap();
    let mut f = Forward::new(&m);
    let c = [0.3, -1.0, 2.0, 0.0];
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let a = f.tape.constant(Tensor::row(c.to_vec()));
    let b = f.tape.constant(Tensor::row(vec![1.0, 0.5, -2.0, 4.0]));
    let and = f.fuzzy_logical(LogicalOp::Intersection, &[a, a]).unwrap();
    for (out, x) in f.tape.value(and).data().iter().zip(c) {
        assert!((sig(*out) - sig(x) * sig(x)).abs() < 1e-12);
    }
    let and = f.fuzzy_logical(LogicalOp::Intersection, &[a, b]).unwrap();
    let bv = f.tape.value(b).data().to_vec();
    for ((out, x), y) in f.tape.value(and).data().iter().zip(c).zip(bv) {
        assert!(sig(*out) <= sig(x).min(sig(y)) + 1e-12);
    }
    let top = f.tape.constant(Tensor::row(vec![60.0; 4]));
    let or = f.fuzzy_logical(LogicalOp::Union, &[a, top]).unwrap();
    for out in f.tape.value(or).data() {
        assert!((sig(*out) - 1.0).abs() < 1e-5);
    }
}

#[test]
fn invocation_count_is_node_count() {
    let g = graph();
    for variadic in [false, true] {
        let cfg = ModelConfig {
            cardinality: if variadic { Cardinality::Variadic } else { Cardinality::Pairwise },
            ..small(8, 2)
        };
        let m = LkhgtModel::new(cfg, g.num_entities(), g.num_relations()).unwrap();
        for t in QueryType::ALL {
            let (tree, _) = grounded(t, &g, 1);
            let (_, stats) = m.execute(&tree).unwrap();
            assert_eq!(stats.invocations(), tree.node_count(), "{t}");
            if t == QueryType::P1 {
                assert_eq!(stats.logical_calls, 0);
            }
            if variadic {
                assert_eq!(stats.logical_passes, stats.logical_calls);
            }
        }
    }
}

#[test]
fn positional_encoding_separates_swapped_arguments() {
    let atoms = |x: u32, y: u32| atom(vec![Arg::Const(EntityId(x)), Arg::Const(EntityId(y)), Arg::Target], false);
    for (pe, differ) in [(Positional::Sinusoidal, true), (Positional::None, false)] {
        let m = LkhgtModel::new(ModelConfig { positional: pe, ..small(8, 2) }, 4, 1).unwrap();
        let (a, _) = m.execute(&atoms(1, 2)).unwrap();
        let (b, _) = m.execute(&atoms(2, 1)).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert_eq!(diff > 1e-6, differ, "{pe:?}: {diff}");
    }
}

#[test]
fn negation_changes_the_projection() {
    let m = LkhgtModel::new(small(8, 2), 4, 1).unwrap();
    let args = vec![Arg::Const(EntityId(0)), Arg::Target];
    let (a, _) = m.execute(&atom(args.clone(), false)).unwrap();
    let (b, _) = m.execute(&atom(args.clone(), false)).unwrap();
    let (c, _) = m.execute(&atom(args, true)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn untrained_loss_is_near_uniform() {
    let g = graph();
    let m = LkhgtModel::new(ModelConfig::desk(), g.num_entities(), g.num_relations()).unwrap();
    let items: Vec<(QueryNode, EntityId)> = (0..40).map(|s| grounded(QueryType::ALL[s as usize % 14], &g, s)).collect();
    let refs: Vec<(&QueryNode, EntityId)> = items.iter().map(|(t, a)| (t, *a)).collect();
    let loss = m.loss(&refs).unwrap();
    let uniform = (g.num_entities() as f64).ln();
    assert!((loss - uniform).abs() < 0.1 * uniform, "{loss} vs {uniform}");
}

#[test]
fn decoder_shapes_and_ranking() {
    let m = LkhgtModel::new(small(8, 2), 6, 1).unwrap();
    let tree = atom(vec![Arg::Const(EntityId(0)), Arg::Target], false);
    let (z, _) = m.execute(&tree).unwrap();
    assert_eq!(m.decode(&z).unwrap().len(), 6);
    let cos = m.cosine_scores(&z);
    let scaled: Vec<f64> = z.iter().map(|x| x * 3.5).collect();
    let cos2 = m.cosine_scores(&scaled);
    let order = |s: &[f64]| crate::eval::rank_scores(s, &Default::default());
    assert_eq!(order(&cos), order(&cos2));
    let exclude = (0..6).filter(|&e| e != 4).map(EntityId).collect();
    assert_eq!(m.rank(&tree, &exclude).unwrap(), vec![EntityId(4)]);
    let tied = LkhgtModel::new(ModelConfig { decoder: DecoderMode::Tied, ..small(8, 2) }, 6, 1).unwrap();
    let (z, _) = tied.execute(&tree).unwrap();
    let logits = tied.decode(&z).unwrap();
    let table = tied.params.get(tied.ids.entity);
    for (e, l) in logits.iter().enumerate() {
        let dot: f64 = table.row_slice(e).iter().zip(&z).map(|(a, b)| a * b).sum();
        assert!((l - dot).abs() < 1e-12);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let g = graph();
    let m = LkhgtModel::new(small(4, 1), g.num_entities(), g.num_relations()).unwrap();
    let items: Vec<(QueryNode, EntityId)> = [QueryType::P1, QueryType::In2]
        .into_iter()
        .map(|t| grounded(t, &g, 3))
        .collect();
    let refs: Vec<(&QueryNode, EntityId)> = items.iter().map(|(t, a)| (t, *a)).collect();
    let report = gradient_check(&m, &refs, 1e-5, 1e-6).unwrap();
    assert_eq!(report.checked, m.params.num_scalars());
    assert!(report.max_rel < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = LkhgtModel::new(small(8, 2), 5, 2).unwrap();
    let extra = BTreeMap::from([("vocab_hash".to_string(), "abc".to_string())]);
    m.save(&path, &extra).unwrap();
    let (back, meta) = LkhgtModel::load(&path).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.config, m.config);
    assert_eq!(meta["vocab_hash"], "abc");
    let other = LkhgtModel::new(small(8, 2), 6, 2).unwrap();
    let mut target = other.clone();
    assert!(target.replace_params(m.params.clone()).is_err());
}

#[test]
fn training_is_deterministic_and_filters_types() {
    let g = graph();
    let mut rng = seeding::stream(2, &[b"t"]);
    let instances: Vec<crate::query::QueryInstance> = [QueryType::P1, QueryType::P3, QueryType::I2]
        .iter()
        .flat_map(|&t| {
            (0..6)
                .map(|_| {
                    let (tree, _) = sampler::ground(&t.template(), &g, &mut rng, 100).unwrap();
                    sampler::label_train(t, tree, &g)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let cfg = ModelConfig { epochs: 2, batch_size: 5, log_mrr_sample: 4, ..small(8, 2) };
    let run = |filter: &TypeFilter| {
        let mut m = LkhgtModel::new(cfg.clone(), g.num_entities(), g.num_relations()).unwrap();
        let r = train(&mut m, &instances, filter).unwrap();
        (m.params, r)
    };
    let (p1, r1) = run(&TypeFilter::ood());
    let (p2, r2) = run(&TypeFilter::ood());
    assert_eq!(p1, p2);
    assert_eq!(r1, r2);
    assert_eq!(r1.instances, 12);
    assert_eq!(r1.epochs.len(), 2);
    assert!(r1.to_tsv().starts_with("epoch\tloss\ttrain_mrr\n1\t"));
    assert_eq!(run(&TypeFilter::All).1.instances, 18);
    let none = TypeFilter::Include([QueryType::Pni].into_iter().collect());
    let mut m = LkhgtModel::new(cfg.clone(), g.num_entities(), g.num_relations()).unwrap();
    assert!(matches!(train(&mut m, &instances, &none), Err(ModelError::EmptyDataset)));
}

#[test]
fn ood_filter_drops_exactly_four_types() {
    let f = TypeFilter::ood();
    let dropped: Vec<QueryType> = QueryType::ALL.into_iter().filter(|t| !f.keeps(*t)).collect();
    assert_eq!(dropped, vec![QueryType::P3, QueryType::I3, QueryType::In3, QueryType::Inp]);
    assert!(QueryType::ALL.iter().all(|t| TypeFilter::All.keeps(*t)));
}
