use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use super::{LkhgtModel, ModelError};
use crate::eval;
use crate::khg::EntityId;
use crate::query::{QueryInstance, QueryNode, QueryType};
use crate::seeding;
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients};

/// Instances per tape; chunk gradients are reduced in chunk order.
const CHUNK: usize = 16;

/// Which query types reach the optimizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TypeFilter {
    All,
    Include(BTreeSet<QueryType>),
    Exclude(BTreeSet<QueryType>),
}

impl TypeFilter {
    /// Everything except the out-of-distribution evaluation types.
    pub fn ood() -> Self {
        TypeFilter::Exclude(QueryType::OOD_HELD_OUT.into_iter().collect())
    }

    pub fn keeps(&self, t: QueryType) -> bool {
        match self {
            TypeFilter::All => true,
            TypeFilter::Include(s) => s.contains(&t),
            TypeFilter::Exclude(s) => !s.contains(&t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_mrr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub instances: usize,
    pub steps: u64,
}

impl TrainReport {
    /// `epoch\tloss\ttrain_mrr`, one row per epoch.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tloss\ttrain_mrr\n");
        for e in &self.epochs {
            let mrr = e.train_mrr.map_or("-".to_string(), |m| format!("{m:.6}"));
            out.push_str(&format!("{}\t{:.6}\t{}\n", e.epoch, e.loss, mrr));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

pub fn train(
    model: &mut LkhgtModel,
    instances: &[QueryInstance],
    filter: &TypeFilter,
) -> Result<TrainReport, ModelError> {
    train_with_log(model, instances, filter, |_| {})
}

/// Adam on the decoder cross-entropy. Each epoch visits every kept instance
/// once in a seeded order, with one target drawn uniformly from its answers.
pub fn train_with_log(
    model: &mut LkhgtModel,
    instances: &[QueryInstance],
    filter: &TypeFilter,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport, ModelError> {
    let kept: Vec<(&QueryNode, Vec<EntityId>)> = instances
        .iter()
        .filter(|q| filter.keeps(q.qtype))
        .map(|q| (&q.tree, q.answers().into_iter().collect::<Vec<_>>()))
        .filter(|(_, a)| !a.is_empty())
        .collect();
    if kept.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let cfg = model.config.clone();
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let probe: Vec<&QueryInstance> = instances
        .iter()
        .filter(|q| filter.keeps(q.qtype) && !q.hard.is_empty())
        .take(cfg.log_mrr_sample)
        .collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let ep = (epoch as u64).to_le_bytes();
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.shuffle(&mut seeding::stream(cfg.seed, &[b"order", &ep]));
        let mut pick = seeding::stream(cfg.seed, &[b"answer", &ep]);
        let targets: Vec<EntityId> = order
            .iter()
            .map(|&i| {
                let answers = &kept[i].1;
                answers[pick.random_range(0..answers.len())]
            })
            .collect();
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let offset = b * cfg.batch_size;
            let items: Vec<(&QueryNode, EntityId)> = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| (kept[i].0, targets[offset + k]))
                .collect();
            let model_ref = &*model;
            let parts: Vec<Result<(f64, Gradients, usize), ModelError>> = items
                .par_chunks(CHUNK)
                .enumerate()
                .map(|(c, chunk)| {
                    let rng = (cfg.dropout > 0.0).then(|| {
                        seeding::stream(
                            cfg.seed,
                            &[b"dropout", &ep, &(b as u64).to_le_bytes(), &(c as u64).to_le_bytes()],
                        )
                    });
                    let (loss, grads) = model_ref.loss_and_grads(chunk, rng)?;
                    Ok((loss, grads, chunk.len()))
                })
                .collect();
            let mut grads = Gradients::zeros_like(&model.params);
            let n = items.len() as f64;
            for part in parts {
                let (loss, g, len) = part?;
                grads.add_scaled(&g, len as f64 / n);
                total += loss * len as f64;
            }
            adam_step(&mut model.params, &grads, &mut adam);
        }
        let train_mrr = if probe.is_empty() {
            None
        } else {
            let model_ref = &*model;
            let scores: Vec<f64> = probe
                .par_iter()
                .map(|q| {
                    let s = model_ref.scores(&q.tree)?;
                    eval::filtered_mrr(&s, &q.easy, &q.hard, false)
                        .map_err(|e| ModelError::Metric(e.to_string()))
                })
                .collect::<Result<_, _>>()?;
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        };
        let log = EpochLog {
            epoch: epoch + 1,
            loss: total / kept.len() as f64,
            train_mrr,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainReport {
        epochs: logs,
        instances: kept.len(),
        steps: adam.step,
    })
}
