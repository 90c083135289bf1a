//! Stage two: fine-tuning on graded annotations with binarized labels,
//! pairwise / multi-negative softmax losses, head-query duplication and
//! validation-based epoch selection.

mod data;
mod losses;

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use data::{
    annotations_to_relevance, binarize, duplicate_head_queries, read_annotations, sample_groups, split_by_query,
    synthetic_annotations, write_annotations, AnnotatedExample, Group, GroupSample,
};
pub use losses::{pairwise_loss, softmax_negatives_loss};

use crate::dataset::{score_pairs, Featurizer};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, Gain, DEFAULT_K};
use crate::neural::{adamw_step, forward_backward_train, AdamWConfig, Checkpoint, Example, OptimizerState};
use crate::pretrain::{listwise_loss, LossForm};
use crate::{seed, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneLoss {
    Pairwise,
    SoftmaxNegatives,
    ListwiseEq1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub loss: FinetuneLoss,
    pub form: LossForm,
    /// Group size `T` of the softmax-negatives loss: one positive plus
    /// `T − 1` negatives.
    pub group_size: usize,
    pub head_dup_factor: usize,
    pub split_ratio: f64,
    /// Groups sampled per query (per copy of a duplicated query) each epoch.
    pub groups_per_query: usize,
    /// Groups (or query lists for the listwise loss) per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            loss: FinetuneLoss::SoftmaxNegatives,
            form: LossForm::Log,
            group_size: 4,
            head_dup_factor: 2,
            split_ratio: 0.8,
            groups_per_query: 4,
            batch_size: 16,
            epochs: 5,
            lr: 3e-4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be at least 2"));
        }
        if self.head_dup_factor < 1 {
            return Err(Error::invalid("head_dup_factor must be at least 1"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid("split_ratio must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.groups_per_query == 0 {
            return Err(Error::invalid("batch_size and groups_per_query must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr and weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Group size actually used by the configured loss.
    pub fn effective_group_size(&self) -> usize {
        match self.loss {
            FinetuneLoss::Pairwise => 2,
            _ => self.group_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    /// Mean loss per group (or per query list); 0 for epoch 0.
    pub train_loss: f64,
    pub validation_dcg: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput<T> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<FinetuneEpoch>,
    /// Epoch whose parameters were kept; 0 means the input checkpoint.
    pub best_epoch: usize,
    pub train: Vec<AnnotatedExample>,
    pub validation: Vec<AnnotatedExample>,
}

/// Mean validation DCG@10 of `ckpt` on `validation`.
pub fn validation_dcg<T: Scalar>(ckpt: &Checkpoint<T>, data: &Featurizer, validation: &[AnnotatedExample]) -> Result<f64> {
    let rel = annotations_to_relevance(validation)?;
    let scores = score_pairs(&ckpt.scorer, data, &ckpt.vocab, rel.keys())?;
    Ok(evaluate_run("validation", &scores, &rel, DEFAULT_K, Gain::Exponential)?.mean_dcg)
}

/// Training units of one epoch: index lists into a deduplicated example
/// table, each with its loss labels.
struct Unit {
    idx: Vec<usize>,
    positive: Vec<bool>,
}

/// Fine-tunes `checkpoint` on the training part of `annotations` and keeps
/// the epoch with the best validation DCG@10 (epoch 0 included).
pub fn finetune<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    data: &Featurizer,
    annotations: &[AnnotatedExample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutput<T>> {
    cfg.validate()?;
    annotations_to_relevance(annotations)?;
    let (train, validation) = split_by_query(annotations, cfg.split_ratio, cfg.seed)?;
    let train = duplicate_head_queries(train, cfg.head_dup_factor, cfg.seed);

    let trainable = sample_groups(&train, 2, 1, 0)?;
    if trainable.groups.is_empty() {
        return Err(Error::NoTrainableData(
            "no training query has both a positive and a negative document".into(),
        ));
    }

    let start = Instant::now();
    let mut best_dcg = validation_dcg(checkpoint, data, &validation)?;
    let mut log = vec![FinetuneEpoch {
        epoch: 0,
        train_loss: 0.0,
        validation_dcg: best_dcg,
        wall_secs: start.elapsed().as_secs_f64(),
    }];
    let mut best = checkpoint.clone();
    let mut best_epoch = 0;
    if cfg.epochs == 0 {
        return Ok(FinetuneOutput { checkpoint: best, log, best_epoch, train, validation });
    }

    let mut current = checkpoint.clone();
    let mut state = OptimizerState::new(
        &current.scorer,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let max_seq_len = current.scorer.config.max_seq_len;
    let mut cache: HashMap<(String, String), Example<T>> = HashMap::new();
    let mut example = |q: &str, d: &str| -> Result<Example<T>> {
        let key = (q.to_owned(), d.to_owned());
        if let Some(e) = cache.get(&key) {
            return Ok(e.clone());
        }
        let e = data.example(q, d, &checkpoint.vocab, max_seq_len)?;
        cache.insert(key, e.clone());
        Ok(e)
    };

    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let epoch_seed = seed::derive(cfg.seed, "finetune-epoch", epoch as u64);
        // (query_id, doc_ids, positives) per unit.
        let mut units: Vec<(String, Vec<String>, Vec<bool>)> = match cfg.loss {
            FinetuneLoss::ListwiseEq1 => query_lists(&train),
            _ => sample_groups(&train, cfg.effective_group_size(), cfg.groups_per_query, epoch_seed)?
                .groups
                .into_iter()
                .map(|g| {
                    let n = g.doc_ids.len();
                    let pos = (0..n).map(|i| i + 1 == n).collect();
                    (g.query_id, g.doc_ids, pos)
                })
                .collect(),
        };
        units.shuffle(&mut seed::rng(epoch_seed, "unit-order", 0));

        let mut total = 0.0;
        for chunk in units.chunks(cfg.batch_size) {
            step += 1;
            let mut index: HashMap<(&str, &str), usize> = HashMap::new();
            let mut examples = Vec::new();
            let mut batch = Vec::with_capacity(chunk.len());
            for (q, docs, pos) in chunk {
                let mut idx = Vec::with_capacity(docs.len());
                for d in docs {
                    let i = match index.get(&(q.as_str(), d.as_str())) {
                        Some(&i) => i,
                        None => {
                            examples.push(example(q, d)?);
                            index.insert((q, d), examples.len() - 1);
                            examples.len() - 1
                        }
                    };
                    idx.push(i);
                }
                batch.push(Unit { idx, positive: pos.clone() });
            }
            let loss_fn = |scores: &[T]| unit_losses(scores, &batch, cfg);
            let (loss, grads) = forward_backward_train(
                &current.scorer,
                &examples,
                loss_fn,
                seed::derive(cfg.seed, "finetune-dropout", step),
            )?;
            adamw_step(&mut current.scorer, &grads, &mut state)?;
            current.scorer.check_finite()?;
            total += loss.as_f64();
        }
        let dcg = validation_dcg(&current, data, &validation)?;
        let record = FinetuneEpoch {
            epoch,
            train_loss: total / units.len().max(1) as f64,
            validation_dcg: dcg,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "finetune epoch {} loss {:.6} validation DCG@10 {:.5} ({:.1}s)",
            record.epoch,
            record.train_loss,
            record.validation_dcg,
            record.wall_secs
        );
        log.push(record);
        if dcg > best_dcg {
            best_dcg = dcg;
            best_epoch = epoch;
            best = current.clone();
        }
    }
    best.optimizer = Some(state);
    best.metadata.insert("stage".into(), "finetune".into());
    best.metadata.insert("finetune_config".into(), serde_json::to_string(cfg)?);
    best.metadata.insert("best_epoch".into(), best_epoch.to_string());
    Ok(FinetuneOutput { checkpoint: best, log, best_epoch, train, validation })
}

/// One list per query with at least one positive, repeated once per copy
/// of a duplicated query.
fn query_lists(train: &[AnnotatedExample]) -> Vec<(String, Vec<String>, Vec<bool>)> {
    let mut by_query: BTreeMap<&str, BTreeMap<&str, bool>> = BTreeMap::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in train {
        by_query.entry(&a.query_id).or_default().insert(&a.doc_id, a.grade >= 2);
        *counts.entry(&a.query_id).or_default() += 1;
    }
    by_query
        .into_iter()
        .filter(|(_, docs)| docs.values().any(|&p| p))
        .flat_map(|(q, docs)| {
            let reps = counts[q] / docs.len();
            let (ids, pos): (Vec<String>, Vec<bool>) = docs.into_iter().map(|(d, p)| (d.to_owned(), p)).unzip();
            std::iter::repeat_n((q.to_owned(), ids, pos), reps.max(1))
        })
        .collect()
}

fn unit_losses<T: Scalar>(scores: &[T], units: &[Unit], cfg: &FinetuneConfig) -> Result<(T, Vec<T>)> {
    let mut total = T::zero();
    let mut grad = vec![T::zero(); scores.len()];
    for u in units {
        let x: Vec<T> = u.idx.iter().map(|&i| scores[i]).collect();
        let (l, g) = match cfg.loss {
            FinetuneLoss::Pairwise | FinetuneLoss::SoftmaxNegatives => softmax_negatives_loss(&x, &u.positive, cfg.form)?,
            FinetuneLoss::ListwiseEq1 => {
                let n_pos = u.positive.iter().filter(|&&p| p).count();
                let targets: Vec<T> = u
                    .positive
                    .iter()
                    .map(|&p| if p { T::one() / T::of_usize(n_pos) } else { T::zero() })
                    .collect();
                listwise_loss(&x, &targets, &vec![T::one(); x.len()], cfg.form)?
            }
        };
        total += l;
        for (&i, gi) in u.idx.iter().zip(g) {
            grad[i] += gi;
        }
    }
    Ok((total, grad))
}
