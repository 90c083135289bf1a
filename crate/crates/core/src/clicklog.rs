//! Click logs: session model, filtering, a position-based click simulator,
//! click-ratio estimation and static inverse propensity weights.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{io_create, io_fields, io_read_lines, Relevance};
use crate::error::{Error, Result};
use crate::{seed, Scalar};

/// Number of logged positions.
pub const MAX_POSITIONS: usize = 10;

/// Inverse propensity weights deployed for positions 1..=10, with the
/// leading `pw_1 = 1` followed by the nine published values.
pub const DEPLOYED_WEIGHTS: [f64; MAX_POSITIONS] =
    [1.0, 1.0, 1.19, 1.44, 1.58, 1.89, 1.95, 2.12, 2.26, 2.51];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSession {
    pub query_id: String,
    pub ranked_doc_ids: Vec<String>,
    pub clicks: Vec<bool>,
    pub impression_count: u32,
}

impl ClickSession {
    pub fn new(query_id: impl Into<String>, ranked_doc_ids: Vec<String>, clicks: Vec<bool>) -> Result<Self> {
        if ranked_doc_ids.len() != clicks.len() {
            return Err(Error::LengthMismatch {
                what: "ranked_doc_ids vs clicks",
                left: ranked_doc_ids.len(),
                right: clicks.len(),
            });
        }
        if ranked_doc_ids.len() > MAX_POSITIONS {
            return Err(Error::invalid(format!(
                "session has {} positions, at most {MAX_POSITIONS} are logged",
                ranked_doc_ids.len()
            )));
        }
        Ok(ClickSession {
            query_id: query_id.into(),
            ranked_doc_ids,
            clicks,
            impression_count: 1,
        })
    }

    pub fn num_clicks(&self) -> usize {
        self.clicks.iter().filter(|&&c| c).count()
    }

    /// 1-based position of the last click.
    pub fn last_click_position(&self) -> Option<usize> {
        self.clicks.iter().rposition(|&c| c).map(|i| i + 1)
    }
}

/// Drops sessions without clicks, then every query whose logged candidate
/// pool holds fewer than ten distinct documents.
pub fn filter_sessions(sessions: Vec<ClickSession>) -> Vec<ClickSession> {
    let mut pools: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in &sessions {
        pools
            .entry(&s.query_id)
            .or_default()
            .extend(s.ranked_doc_ids.iter().map(String::as_str));
    }
    let small: BTreeSet<String> = pools
        .into_iter()
        .filter(|(_, pool)| pool.len() < MAX_POSITIONS)
        .map(|(q, _)| q.to_owned())
        .collect();
    sessions
        .into_iter()
        .filter(|s| s.num_clicks() > 0 && !small.contains(&s.query_id))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickSimConfig {
    pub eta: f64,
    pub epsilon_noise: f64,
    pub shuffle_top10: bool,
    pub seed: u64,
}

impl Default for ClickSimConfig {
    fn default() -> Self {
        ClickSimConfig {
            eta: 1.0,
            epsilon_noise: 0.1,
            shuffle_top10: false,
            seed: 0,
        }
    }
}

impl ClickSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::invalid("eta must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.epsilon_noise) {
            return Err(Error::invalid("epsilon_noise must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Examination probability `(1/i)^eta` at 1-based position `i`.
    pub fn examination(&self, position: usize) -> f64 {
        (1.0 / position as f64).powf(self.eta)
    }

    /// Click probability given examination, from the DCG-style gain.
    pub fn attractiveness(&self, grade: u8) -> f64 {
        let gain = (2f64.powi(grade as i32) - 1.0) / 15.0;
        self.epsilon_noise + (1.0 - self.epsilon_noise) * gain
    }
}

/// Simulates one impression of `ranking` for `query_id` under the
/// position-based model. `session_index` selects the random stream.
pub fn simulate_clicks(
    relevance: &Relevance,
    query_id: &str,
    ranking: &[String],
    cfg: &ClickSimConfig,
    session_index: u64,
) -> Result<ClickSession> {
    if ranking.len() > MAX_POSITIONS {
        return Err(Error::invalid("ranking longer than the logged depth"));
    }
    let mut rng = seed::rng(cfg.seed, "click-session", session_index);
    let mut shown = ranking.to_vec();
    if cfg.shuffle_top10 {
        shown.shuffle(&mut rng);
    }
    let clicks = shown
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let grade = relevance
                .get(&(query_id.to_owned(), d.clone()))
                .copied()
                .unwrap_or(0);
            let p = cfg.examination(i + 1) * cfg.attractiveness(grade);
            rng.gen::<f64>() < p
        })
        .collect();
    ClickSession::new(query_id, shown, clicks)
}

/// Simulates `num_sessions` impressions, each of a query drawn uniformly from
/// `rankings`. Output order is the session index order whatever the thread count.
pub fn simulate_log(
    relevance: &Relevance,
    rankings: &[(String, Vec<String>)],
    num_sessions: usize,
    cfg: &ClickSimConfig,
) -> Result<Vec<ClickSession>> {
    cfg.validate()?;
    if rankings.is_empty() {
        return Err(Error::invalid("no rankings to simulate"));
    }
    (0..num_sessions as u64)
        .into_par_iter()
        .map(|s| {
            let q = seed::rng(cfg.seed, "click-query", s).gen_range(0..rankings.len());
            let (qid, ranking) = &rankings[q];
            simulate_clicks(relevance, qid, ranking, cfg, s)
        })
        .collect()
}

/// Per-position click-through rate `clicks / impressions` for positions 1..=10.
pub fn estimate_click_ratios<T: Scalar>(sessions: &[ClickSession]) -> Result<Vec<T>> {
    let mut shown = [0u64; MAX_POSITIONS];
    let mut clicked = [0u64; MAX_POSITIONS];
    for s in sessions {
        let w = s.impression_count as u64;
        for (i, &c) in s.clicks.iter().enumerate().take(MAX_POSITIONS) {
            shown[i] += w;
            if c {
                clicked[i] += w;
            }
        }
    }
    if let Some(i) = shown.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateLog(format!("position {} never shown", i + 1)));
    }
    if clicked[0] == 0 {
        return Err(Error::DegenerateLog("no clicks at position 1".into()));
    }
    Ok(shown
        .iter()
        .zip(&clicked)
        .map(|(&n, &c)| T::of(c as f64) / T::of(n as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityModel<T> {
    /// Static weights `pw_i = (cr_1 / cr_i)^alpha`.
    ClickRatio { alpha: T, weights: Vec<T> },
    /// Learned per-position logits; the examination distribution is their softmax.
    Dla { position_logits: Vec<T> },
}

impl<T: Scalar> PropensityModel<T> {
    /// Unit weights, i.e. no correction.
    pub fn uniform() -> Self {
        PropensityModel::ClickRatio {
            alpha: T::zero(),
            weights: vec![T::one(); MAX_POSITIONS],
        }
    }

    pub fn deployed() -> Self {
        PropensityModel::ClickRatio {
            alpha: T::of(0.25),
            weights: DEPLOYED_WEIGHTS.iter().map(|&w| T::of(w)).collect(),
        }
    }

    /// Inverse propensity weight at 1-based `position`, normalised so that
    /// position 1 has weight 1. Positions past the table reuse its last entry.
    pub fn weight(&self, position: usize) -> T {
        match self {
            PropensityModel::ClickRatio { weights, .. } => {
                weights[position.clamp(1, weights.len()) - 1]
            }
            PropensityModel::Dla { position_logits } => {
                let i = position.clamp(1, position_logits.len()) - 1;
                (position_logits[0] - position_logits[i]).exp()
            }
        }
    }

    pub fn weights(&self) -> Vec<T> {
        (1..=MAX_POSITIONS).map(|p| self.weight(p)).collect()
    }
}

/// Static inverse propensity weights from click ratios.
pub fn click_ratio_propensity<T: Scalar>(cr: &[T], alpha: T) -> Result<PropensityModel<T>> {
    if cr.is_empty() {
        return Err(Error::invalid("no click ratios"));
    }
    if let Some(i) = cr.iter().position(|&c| !(c > T::zero()) || !c.is_finite()) {
        return Err(Error::DegenerateLog(format!(
            "click ratio at position {} is {}",
            i + 1,
            cr[i]
        )));
    }
    let weights = cr
        .iter()
        .enumerate()
        .map(|(i, &c)| if i == 0 { T::one() } else { (cr[0] / c).powf(alpha) })
        .collect();
    Ok(PropensityModel::ClickRatio { alpha, weights })
}

/// `query_id \t d1,...,dn \t c1,...,cn` with 0/1 click flags.
pub fn write_click_log(path: &Path, sessions: &[ClickSession]) -> Result<()> {
    let mut w = io_create(path)?;
    let io = |e| Error::io(path, e);
    for s in sessions {
        let flags: Vec<&str> = s.clicks.iter().map(|&c| if c { "1" } else { "0" }).collect();
        writeln!(w, "{}\t{}\t{}", s.query_id, s.ranked_doc_ids.join(","), flags.join(","))
            .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_click_log(path: &Path) -> Result<Vec<ClickSession>> {
    io_read_lines(path)?
        .iter()
        .map(|(n, line)| {
            let f = io_fields(path, *n, line, 3)?;
            let docs: Vec<String> = f[1].split(',').map(str::to_owned).collect();
            let clicks = f[2]
                .split(',')
                .map(|c| match c.trim() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    other => Err(Error::parse(path, *n, format!("bad click flag {other:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            ClickSession::new(f[0], docs, clicks).map_err(|e| Error::parse(path, *n, e.to_string()))
        })
        .collect()
}
