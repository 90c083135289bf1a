//! Stage one: training the scorer on click logs with refined soft labels,
//! random negatives, position debiasing and the listwise or priority-pair
//! objectives.

mod dla;
mod labels;
mod losses;
mod sampling;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use dla::{
    dla_propensity_loss, dla_ranker_loss, examination_weights, relevance_weights, MAX_RELEVANCE_WEIGHT,
};
pub use labels::{min_max, raw_labels, refine_labels, tempered_softmax, RefinedEntry, RefinedList};
pub use losses::{
    build_priority_pairs, build_priority_pairs_with_rules, listwise_loss, pairwise_pretrain_loss, LossForm,
    PairRule, FEATURE_MARGIN,
};
pub use sampling::{inject_random_negatives, replace_post_click};

use crate::clicklog::{
    click_ratio_propensity, estimate_click_ratios, filter_sessions, ClickSession, PropensityModel, MAX_POSITIONS,
};
use crate::dataset::Featurizer;
use crate::error::{Error, Result};
use crate::features::FeatureName;
use crate::neural::{
    adamw_step, forward_backward_train, AdamWConfig, Checkpoint, Example, OptimizerState, ScorerConfig, Vocab,
    WideDeepScorer,
};
use crate::{seed, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpwMode {
    None,
    ClickRatio,
    Dla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainLoss {
    ListwiseAsWritten,
    ListwiseLog,
    PairwisePriority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub delta: f64,
    pub tau: f64,
    pub refinement_feature: FeatureName,
    pub num_random_negatives: usize,
    pub replace_post_click: bool,
    pub ipw: IpwMode,
    /// Exponent of the click-ratio weights.
    pub ipw_alpha: f64,
    pub loss: PretrainLoss,
    /// Form of the priority-pair loss.
    pub pair_form: LossForm,
    pub epochs: usize,
    /// Queries per batch; every session of a query joins its batch.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning rate of the position logits under dual learning.
    pub propensity_lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            delta: 2.0,
            tau: 0.1,
            refinement_feature: FeatureName::Bm25,
            num_random_negatives: 2,
            replace_post_click: false,
            ipw: IpwMode::ClickRatio,
            ipw_alpha: 0.25,
            loss: PretrainLoss::ListwiseLog,
            pair_form: LossForm::Log,
            epochs: 3,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            propensity_lr: 0.05,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if !self.delta.is_finite() {
            return Err(Error::invalid("delta must be finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0) || !(self.propensity_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rates and weight decay must be non-negative"));
        }
        if !(self.ipw_alpha >= 0.0) {
            return Err(Error::invalid("ipw_alpha must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss per logged list.
    pub loss: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput<T> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<EpochRecord>,
}

/// Static propensity model for `mode`, estimated from the (filtered) log.
pub fn propensity_for<T: Scalar>(mode: IpwMode, alpha: f64, sessions: &[ClickSession]) -> Result<PropensityModel<T>> {
    match mode {
        IpwMode::None => Ok(PropensityModel::uniform()),
        IpwMode::ClickRatio => click_ratio_propensity(&estimate_click_ratios::<T>(sessions)?, T::of(alpha)),
        IpwMode::Dla => Ok(PropensityModel::Dla {
            position_logits: vec![T::zero(); MAX_POSITIONS],
        }),
    }
}

/// A batch of lists over deduplicated examples: `lists[i].1[j]` is the index
/// into `examples` of entry `j` of list `i`.
struct ListBatch<T> {
    examples: Vec<Example<T>>,
    lists: Vec<(RefinedList<T>, Vec<usize>)>,
}

struct Trainer<'a, T> {
    data: &'a Featurizer,
    cfg: &'a PretrainConfig,
    vocab: &'a Vocab,
    max_seq_len: usize,
    examples: HashMap<(String, String), Example<T>>,
    features: HashMap<(String, String), T>,
}

impl<T: Scalar> Trainer<'_, T> {
    fn feature(&mut self, q: &str, d: &str) -> Result<T> {
        let key = (q.to_owned(), d.to_owned());
        if let Some(&f) = self.features.get(&key) {
            return Ok(f);
        }
        let f = self.data.features::<T>(q, d)?.get(self.cfg.refinement_feature);
        self.features.insert(key, f);
        Ok(f)
    }

    fn example(&mut self, q: &str, d: &str) -> Result<Example<T>> {
        let key = (q.to_owned(), d.to_owned());
        if let Some(e) = self.examples.get(&key) {
            return Ok(e.clone());
        }
        let e = self.data.example(q, d, self.vocab, self.max_seq_len)?;
        self.examples.insert(key, e.clone());
        Ok(e)
    }

    fn build_batch(
        &mut self,
        queries: &[&str],
        by_query: &BTreeMap<&str, Vec<(usize, &ClickSession)>>,
        stream: u64,
    ) -> Result<ListBatch<T>> {
        let cfg = self.cfg;
        let tau = T::of(cfg.tau);
        let logged: BTreeMap<&str, BTreeSet<&str>> = queries
            .iter()
            .map(|&q| {
                let docs = by_query[q]
                    .iter()
                    .flat_map(|(_, s)| s.ranked_doc_ids.iter().map(String::as_str))
                    .collect();
                (q, docs)
            })
            .collect();
        let mut index: HashMap<(String, String), usize> = HashMap::new();
        let mut batch = ListBatch {
            examples: Vec::new(),
            lists: Vec::new(),
        };
        for &q in queries {
            let own = &logged[q];
            let pool: Vec<String> = logged
                .iter()
                .filter(|(other, _)| **other != q)
                .flat_map(|(_, docs)| docs.iter())
                .filter(|d| !own.contains(*d))
                .map(|d| (*d).to_owned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            for &(si, session) in &by_query[q] {
                let feats = session
                    .ranked_doc_ids
                    .iter()
                    .map(|d| self.feature(q, d))
                    .collect::<Result<Vec<T>>>()?;
                let mut list = RefinedList::from_session(session, &feats, T::of(cfg.delta), tau)?;
                let list_seed = seed::derive(cfg.seed, "pretrain-list", stream ^ seed::mix(si as u64));
                if cfg.replace_post_click {
                    replace_post_click(&mut list, &pool, seed::derive(list_seed, "replace", 0));
                }
                inject_random_negatives(
                    &mut list,
                    &pool,
                    cfg.num_random_negatives,
                    seed::derive(list_seed, "inject", 0),
                );
                list.normalize_targets(tau)?;
                let mut idx = Vec::with_capacity(list.len());
                for e in &list.entries {
                    let key = (q.to_owned(), e.doc_id.clone());
                    let i = match index.get(&key) {
                        Some(&i) => i,
                        None => {
                            let i = batch.examples.len();
                            batch.examples.push(self.example(q, &e.doc_id)?);
                            index.insert(key, i);
                            i
                        }
                    };
                    idx.push(i);
                }
                batch.lists.push((list, idx));
            }
        }
        Ok(batch)
    }
}

/// Entry weights: inverse propensity at logged positions, 1 for negatives.
fn entry_weights<T: Scalar>(list: &RefinedList<T>, propensity: &PropensityModel<T>) -> Vec<T> {
    list.entries
        .iter()
        .map(|e| e.position.map_or(T::one(), |p| propensity.weight(p)))
        .collect()
}

/// Loss of one list under the configured objective; gradient w.r.t. the
/// list's scores.
pub fn list_loss<T: Scalar>(
    list: &RefinedList<T>,
    scores: &[T],
    propensity: &PropensityModel<T>,
    loss: PretrainLoss,
    pair_form: LossForm,
) -> Result<(T, Vec<T>)> {
    let w = entry_weights(list, propensity);
    match loss {
        PretrainLoss::ListwiseAsWritten => listwise_loss(scores, &list.targets(), &w, LossForm::AsWritten),
        PretrainLoss::ListwiseLog => listwise_loss(scores, &list.targets(), &w, LossForm::Log),
        PretrainLoss::PairwisePriority => {
            let pairs = build_priority_pairs(list);
            let pw: Vec<T> = pairs.iter().map(|&(win, _)| w[win]).collect();
            pairwise_pretrain_loss(scores, &pairs, Some(&pw), pair_form)
        }
    }
}

/// Trains a freshly initialised scorer on `sessions`.
pub fn pretrain<T: Scalar>(
    data: &Featurizer,
    sessions: &[ClickSession],
    scorer_config: &ScorerConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput<T>> {
    cfg.validate()?;
    let sessions = filter_sessions(sessions.to_vec());
    if sessions.is_empty() {
        return Err(Error::DegenerateLog("no sessions left after filtering".into()));
    }
    let vocab = data.vocab();
    let scorer_config = ScorerConfig {
        vocab_size: vocab.size(),
        ..scorer_config.clone()
    };
    let mut scorer = WideDeepScorer::<T>::new(&scorer_config, seed::derive(cfg.seed, "scorer-init", 0))?;
    let mut propensity = propensity_for::<T>(cfg.ipw, cfg.ipw_alpha, &sessions)?;
    let opt = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = OptimizerState::new(&scorer, opt);
    let mut logit_state = OptimizerState::new(
        &vec![T::zero(); MAX_POSITIONS],
        AdamWConfig {
            lr: cfg.propensity_lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );

    let mut by_query: BTreeMap<&str, Vec<(usize, &ClickSession)>> = BTreeMap::new();
    for (i, s) in sessions.iter().enumerate() {
        by_query.entry(&s.query_id).or_default().push((i, s));
    }
    let qids: Vec<&str> = by_query.keys().copied().collect();
    let mut trainer = Trainer {
        data,
        cfg,
        vocab: &vocab,
        max_seq_len: scorer_config.max_seq_len,
        examples: HashMap::new(),
        features: HashMap::new(),
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order = qids.clone();
        order.shuffle(&mut seed::rng(cfg.seed, "pretrain-epoch", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = trainer.build_batch(chunk, &by_query, seed::derive(cfg.seed, "pretrain-step", step))?;
            let mut batch_scores = Vec::new();
            let loss_fn = |scores: &[T]| -> Result<(T, Vec<T>)> {
                batch_scores = scores.to_vec();
                let mut loss = T::zero();
                let mut grad = vec![T::zero(); scores.len()];
                for (list, idx) in &batch.lists {
                    let x: Vec<T> = idx.iter().map(|&i| scores[i]).collect();
                    let (l, g) = list_loss(list, &x, &propensity, cfg.loss, cfg.pair_form)?;
                    loss += l;
                    for (&i, gi) in idx.iter().zip(g) {
                        grad[i] += gi;
                    }
                }
                Ok((loss, grad))
            };
            let (loss, grads) = forward_backward_train(
                &scorer,
                &batch.examples,
                loss_fn,
                seed::derive(cfg.seed, "pretrain-dropout", step),
            )?;
            if let PropensityModel::Dla { position_logits } = &mut propensity {
                let mut g = vec![T::zero(); position_logits.len()];
                for (list, idx) in &batch.lists {
                    let x: Vec<T> = idx.iter().map(|&i| batch_scores[i]).collect();
                    let positions: Vec<Option<usize>> = list.entries.iter().map(|e| e.position).collect();
                    let (_, gl) = dla_propensity_loss(position_logits, &x, &list.targets(), &positions)?;
                    for (a, b) in g.iter_mut().zip(gl) {
                        *a += b;
                    }
                }
                adamw_step(position_logits, &g, &mut logit_state)?;
                if position_logits.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("propensity logits".into()));
                }
            }
            adamw_step(&mut scorer, &grads, &mut state)?;
            scorer.check_finite()?;
            total += loss.as_f64();
        }
        let record = EpochRecord {
            epoch,
            loss: total / sessions.len() as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!("pretrain epoch {} loss {:.6} ({:.1}s)", record.epoch, record.loss, record.wall_secs);
        log.push(record);
    }

    let metadata = BTreeMap::from([
        ("stage".to_owned(), "pretrain".to_owned()),
        ("pretrain_config".to_owned(), serde_json::to_string(cfg)?),
    ]);
    Ok(PretrainOutput {
        checkpoint: Checkpoint {
            vocab,
            scorer,
            optimizer: Some(state),
            propensity: Some(propensity),
            metadata,
        },
        log,
    })
}
