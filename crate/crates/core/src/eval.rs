//! Filtered MRR, per-type reports and the ablation runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::QueryDataset;
use crate::khg::EntityId;
use crate::model::{
    train, Cardinality, LkhgtModel, LogicalMode, ModelConfig, ModelError, Positional, TypeFilter,
};
use crate::query::{QueryInstance, QueryNode, QueryType};
use crate::sampler::Split;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query has no hard answers")]
    EmptyHardSet,
    #[error("hard answer {0:?} is missing from the ranking")]
    NotRanked(EntityId),
    #[error("score vector has {found} entries, expected at least {needed}")]
    ShortScores { found: usize, needed: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("scorer failed: {0}")]
    Scorer(String),
}

/// Entities outside `exclude` sorted by descending score; equal scores go
/// to the smaller id.
pub fn rank_scores(scores: &[f64], exclude: &BTreeSet<EntityId>) -> Vec<EntityId> {
    let mut ids: Vec<EntityId> = (0..scores.len() as u32)
        .map(EntityId)
        .filter(|e| !exclude.contains(e))
        .collect();
    ids.sort_by(|a, b| {
        scores[b.index()]
            .total_cmp(&scores[a.index()])
            .then(a.cmp(b))
    });
    ids
}

/// Mean of `1/rank` over `hard`, ranks taken as 1-based positions in `ranked`.
pub fn mrr_query(ranked: &[EntityId], hard: &BTreeSet<EntityId>) -> Result<f64, EvalError> {
    if hard.is_empty() {
        return Err(EvalError::EmptyHardSet);
    }
    let pos: BTreeMap<EntityId, usize> = ranked
        .iter()
        .enumerate()
        .filter(|(_, e)| hard.contains(e))
        .map(|(i, &e)| (e, i + 1))
        .collect();
    let mut sum = 0.0;
    for h in hard {
        let r = pos.get(h).ok_or(EvalError::NotRanked(*h))?;
        sum += 1.0 / *r as f64;
    }
    Ok(sum / hard.len() as f64)
}

/// Rank of each hard answer after removing easy answers and, when
/// `filter_hard` is set, the other hard answers too.
pub fn filtered_ranks(
    scores: &[f64],
    easy: &BTreeSet<EntityId>,
    hard: &BTreeSet<EntityId>,
    filter_hard: bool,
) -> Result<Vec<usize>, EvalError> {
    if let Some(max) = easy.iter().chain(hard).map(|e| e.index()).max() {
        if max >= scores.len() {
            return Err(EvalError::ShortScores {
                found: scores.len(),
                needed: max + 1,
            });
        }
    }
    let ranked = rank_scores(scores, easy);
    let mut ranks = Vec::with_capacity(hard.len());
    let mut hard_seen = 0;
    for (i, e) in ranked.iter().enumerate() {
        if hard.contains(e) {
            ranks.push(if filter_hard { i + 1 - hard_seen } else { i + 1 });
            hard_seen += 1;
        }
    }
    Ok(ranks)
}

/// MRR of one query from raw scores.
pub fn filtered_mrr(
    scores: &[f64],
    easy: &BTreeSet<EntityId>,
    hard: &BTreeSet<EntityId>,
    filter_hard: bool,
) -> Result<f64, EvalError> {
    if hard.is_empty() {
        return Err(EvalError::EmptyHardSet);
    }
    let ranks = filtered_ranks(scores, easy, hard, filter_hard)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / hard.len() as f64)
}

/// Anything that scores every entity for a query.
pub trait Scorer: Sync {
    fn scores(&self, tree: &QueryNode) -> Result<Vec<f64>, EvalError>;

    fn supports(&self, _tree: &QueryNode) -> bool {
        true
    }
}

impl Scorer for LkhgtModel {
    fn scores(&self, tree: &QueryNode) -> Result<Vec<f64>, EvalError> {
        Ok(LkhgtModel::scores(self, tree)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EvalOptions {
    pub filter_hard: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypeScore {
    pub mrr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_type: BTreeMap<QueryType, TypeScore>,
    pub ap: Option<f64>,
    pub an: Option<f64>,
    /// Instances skipped because the scorer cannot handle them.
    pub skipped: usize,
    pub filter_hard: bool,
    pub config: serde_json::Value,
}

fn mean_of(values: &mut [f64]) -> f64 {
    // sorted so the sum is independent of instance order
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores every instance with a non-empty hard set and aggregates per type.
pub fn evaluate(
    scorer: &dyn Scorer,
    instances: &[QueryInstance],
    options: EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport, EvalError> {
    let results: Vec<Option<(QueryType, f64)>> = instances
        .par_iter()
        .map(|q| {
            if q.hard.is_empty() || !scorer.supports(&q.tree) {
                return Ok(None);
            }
            let s = scorer.scores(&q.tree)?;
            Ok(Some((q.qtype, filtered_mrr(&s, &q.easy, &q.hard, options.filter_hard)?)))
        })
        .collect::<Result<_, EvalError>>()?;
    let skipped = instances
        .iter()
        .zip(&results)
        .filter(|(q, r)| r.is_none() && !q.hard.is_empty())
        .count();
    let mut grouped: BTreeMap<QueryType, Vec<f64>> = BTreeMap::new();
    for (t, m) in results.into_iter().flatten() {
        grouped.entry(t).or_default().push(m);
    }
    let per_type: BTreeMap<QueryType, TypeScore> = grouped
        .into_iter()
        .map(|(t, mut v)| {
            let count = v.len();
            (t, TypeScore { mrr: mean_of(&mut v), count })
        })
        .collect();
    let average = |neg: bool| {
        let mut v: Vec<f64> = per_type
            .iter()
            .filter(|(t, _)| t.has_negation() == neg)
            .map(|(_, s)| s.mrr)
            .collect();
        (!v.is_empty()).then(|| mean_of(&mut v))
    };
    Ok(EvalReport {
        ap: average(false),
        an: average(true),
        per_type,
        skipped,
        filter_hard: options.filter_hard,
        config,
    })
}

fn pct(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |m| format!("{:.2}", m * 100.0))
}

/// Header row: a label column, the 14 types, then AP and AN.
pub fn table_header(label: &str) -> String {
    let mut h = label.to_string();
    for t in QueryType::ALL {
        h.push('\t');
        h.push_str(t.name());
    }
    h.push_str("\tAP\tAN");
    h
}

impl EvalReport {
    pub fn mrr(&self, t: QueryType) -> Option<f64> {
        self.per_type.get(&t).map(|s| s.mrr)
    }

    /// Type columns as MRR×100 with two decimals; `-` for absent types.
    pub fn table_row(&self, label: &str) -> String {
        let mut row = label.to_string();
        for t in QueryType::ALL {
            row.push('\t');
            row.push_str(&pct(self.mrr(t)));
        }
        let _ = write!(row, "\t{}\t{}", pct(self.ap), pct(self.an));
        row
    }

    pub fn to_tsv(&self, label: &str) -> String {
        let counts: Vec<String> = QueryType::ALL
            .iter()
            .map(|t| self.per_type.get(t).map_or(0, |s| s.count).to_string())
            .collect();
        format!(
            "{}\n{}\ncount\t{}\t-\t-\n",
            table_header("model"),
            self.table_row(label),
            counts.join("\t")
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// The four compared configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    Fuzzy,
    NoPe,
    Variadic,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Fuzzy, Variant::NoPe, Variant::Variadic];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Fuzzy => "fuzzy",
            Variant::NoPe => "no-pe",
            Variant::Variadic => "variadic",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::Fuzzy => c.logical = LogicalMode::Fuzzy,
            Variant::NoPe => c.positional = Positional::None,
            Variant::Variadic => c.cardinality = Cardinality::Variadic,
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub dataset_hash: String,
    pub final_loss: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean over seeds of the mean per-type MRR of `variant`.
    pub fn mean_mrr(&self, variant: Variant) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| {
                let m: Vec<f64> = r.report.per_type.values().map(|s| s.mrr).collect();
                (!m.is_empty()).then(|| m.iter().sum::<f64>() / m.len() as f64)
            })
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\tseed\tdataset\n", table_header("variant"));
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", r.report.table_row(r.variant.name()), r.seed, r.dataset_hash);
        }
        out.push_str("\nvariant\tmean_mrr\tmin\tmax\n");
        for v in Variant::ALL {
            let per_seed: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| {
                    let m: Vec<f64> = r.report.per_type.values().map(|s| s.mrr).collect();
                    m.iter().sum::<f64>() / m.len().max(1) as f64
                })
                .collect();
            if per_seed.is_empty() {
                continue;
            }
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            let lo = per_seed.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = per_seed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(out, "{}\t{:.4}\t{:.4}\t{:.4}", v.name(), mean, lo, hi);
        }
        out
    }
}

pub struct AblationSpec<'a> {
    pub base: ModelConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub filter: TypeFilter,
    pub options: EvalOptions,
    pub num_entities: usize,
    pub num_relations: usize,
    pub train: &'a [QueryInstance],
    pub test: &'a [QueryInstance],
    pub dataset_hash: String,
}

impl<'a> AblationSpec<'a> {
    /// Train split against test split of a sampled dataset.
    pub fn from_dataset(
        base: ModelConfig,
        dataset: &'a QueryDataset,
        train: &'a [QueryInstance],
        test: &'a [QueryInstance],
        num_entities: usize,
        num_relations: usize,
    ) -> Self {
        AblationSpec {
            base,
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            filter: TypeFilter::ood(),
            options: EvalOptions::default(),
            num_entities,
            num_relations,
            train,
            test,
            dataset_hash: dataset.content_hash(),
        }
    }
}

/// Trains and evaluates every variant under every seed on identical data.
pub fn ablate(spec: &AblationSpec<'_>) -> Result<AblationReport, EvalError> {
    let mut rows = Vec::new();
    for &variant in &spec.variants {
        for &seed in &spec.seeds {
            let config = ModelConfig {
                seed,
                ..variant.apply(&spec.base)
            };
            let mut model = LkhgtModel::new(config.clone(), spec.num_entities, spec.num_relations)?;
            let log = train(&mut model, spec.train, &spec.filter)?;
            let echo = serde_json::to_value(&config).expect("config serializes");
            let report = evaluate(&model, spec.test, spec.options, echo)?;
            rows.push(AblationRow {
                variant,
                seed,
                dataset_hash: spec.dataset_hash.clone(),
                final_loss: log.final_loss().unwrap_or(f64::NAN),
                report,
            });
        }
    }
    Ok(AblationReport { rows })
}

/// Convenience for callers holding a full dataset: train split vs test split.
pub fn splits_of(dataset: &QueryDataset) -> (Vec<QueryInstance>, Vec<QueryInstance>) {
    (dataset.split(Split::Train), dataset.split(Split::Test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(xs: &[u32]) -> BTreeSet<EntityId> {
        xs.iter().copied().map(EntityId).collect()
    }

    fn ranking(xs: &[u32]) -> Vec<EntityId> {
        xs.iter().copied().map(EntityId).collect()
    }

    #[test]
    fn single_hard_answer_first() {
        let m = mrr_query(&ranking(&[4, 1, 2]), &ids(&[4])).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_two_and_four() {
        let m = mrr_query(&ranking(&[0, 7, 1, 9, 3]), &ids(&[7, 9])).unwrap();
        assert!((m - 0.375).abs() < 1e-12);
    }

    #[test]
    fn easy_answer_removal_lifts_rank() {
        // entity 5 is easy and sits above hard answer 2
        let scores = [0.9, 0.1, 0.5, 0.0, 0.2, 0.8];
        let unfiltered = filtered_ranks(&scores, &BTreeSet::new(), &ids(&[2]), false).unwrap();
        assert_eq!(unfiltered, vec![3]);
        let m = filtered_mrr(&scores, &ids(&[5]), &ids(&[2]), false).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_hard_set_is_an_error() {
        assert!(matches!(mrr_query(&ranking(&[1]), &BTreeSet::new()), Err(EvalError::EmptyHardSet)));
        assert!(matches!(mrr_query(&ranking(&[1]), &ids(&[2])), Err(EvalError::NotRanked(_))));
    }

    #[test]
    fn tight_upper_bound_for_several_hard_answers() {
        let hard = ids(&[3, 1, 4]);
        let m = mrr_query(&ranking(&[1, 3, 4, 0, 2]), &hard).unwrap();
        let bound = (1.0 + 0.5 + 1.0 / 3.0) / 3.0;
        assert!((m - bound).abs() < 1e-12);
        let strict = filtered_mrr(&[0.0, 1.0, 0.0, 0.9, 0.8], &BTreeSet::new(), &hard, true).unwrap();
        assert!((strict - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_id() {
        assert_eq!(rank_scores(&[1.0, 2.0, 2.0, 1.0], &BTreeSet::new()), ranking(&[1, 2, 0, 3]));
        assert_eq!(rank_scores(&[1.0, 2.0, 2.0], &ids(&[1, 2])), ranking(&[0]));
    }

    struct Oracle;

    impl Scorer for Oracle {
        fn scores(&self, _tree: &QueryNode) -> Result<Vec<f64>, EvalError> {
            Ok(vec![0.0, 1.0, 0.5])
        }
    }

    fn instance(t: QueryType, easy: &[u32], hard: &[u32]) -> QueryInstance {
        let tree = QueryNode::Projection {
            relation: crate::khg::RelationId(0),
            args: vec![crate::query::Arg::Const(EntityId(0)), crate::query::Arg::Target],
            negated: false,
        };
        QueryInstance {
            qtype: t,
            tree,
            easy: ids(easy),
            hard: ids(hard),
        }
    }

    #[test]
    fn perfect_scorer_gets_full_marks_and_skips_absent_types() {
        let qs = vec![
            instance(QueryType::P1, &[], &[1]),
            instance(QueryType::In2, &[1], &[2]),
            instance(QueryType::I2, &[], &[]),
        ];
        let r = evaluate(&Oracle, &qs, EvalOptions::default(), serde_json::Value::Null).unwrap();
        assert_eq!(r.ap, Some(1.0));
        assert_eq!(r.an, Some(1.0));
        assert_eq!(r.per_type.len(), 2);
        assert!(r.mrr(QueryType::I2).is_none());
        let tsv = r.to_tsv("oracle");
        let header = tsv.lines().next().unwrap();
        assert!(header.starts_with("model\t1P\t2P\t3P\t2I\t3I\tPI\tIP\t2U\tUP\t2IN\t3IN\tINP\tPIN\tPNI\tAP\tAN"));
        assert!(tsv.lines().nth(1).unwrap().starts_with("oracle\t100.00\t-"));
    }

    #[test]
    fn report_ignores_instance_order() {
        let mut qs: Vec<QueryInstance> = (0..20)
            .map(|i| instance(QueryType::P1, &[], &[i % 3]))
            .collect();
        let a = evaluate(&Oracle, &qs, EvalOptions::default(), serde_json::Value::Null).unwrap();
        qs.reverse();
        let b = evaluate(&Oracle, &qs, EvalOptions::default(), serde_json::Value::Null).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn removing_easy_answers_never_worsens_a_rank(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..30),
            picks in proptest::collection::vec(any::<u16>(), 1..10),
        ) {
            let n = scores.len() as u32;
            let hard: BTreeSet<EntityId> = picks.iter().take(2).map(|&p| EntityId(p as u32 % n)).collect();
            let easy: BTreeSet<EntityId> = picks
                .iter()
                .skip(2)
                .map(|&p| EntityId(p as u32 % n))
                .filter(|e| !hard.contains(e))
                .collect();
            let none = BTreeSet::new();
            let before = filtered_ranks(&scores, &none, &hard, false).unwrap();
            let after = filtered_ranks(&scores, &easy, &hard, false).unwrap();
            prop_assert_eq!(before.len(), after.len());
            for (a, b) in after.iter().zip(&before) {
                prop_assert!(a <= b);
            }
            let strict = filtered_ranks(&scores, &easy, &hard, true).unwrap();
            for (s, a) in strict.iter().zip(&after) {
                prop_assert!(s <= a && *s >= 1);
            }
        }
    }
}
