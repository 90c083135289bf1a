//! DCG@k / NDCG@k and per-run reports.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{io_create, io_fields, io_read_lines, Relevance};
use crate::error::{Error, Result};
use crate::Scalar;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// `2^g − 1`
    #[default]
    Exponential,
    /// `g`
    Linear,
}

impl Gain {
    pub fn of(self, grade: u8) -> f64 {
        match self {
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
            Gain::Linear => grade as f64,
        }
    }
}

/// `Σ_{i ≤ min(k, n)} gain(g_i) / log2(i + 1)` over grades in ranked order.
pub fn dcg_with_gain(grades: &[u8], k: usize, gain: Gain) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.of(g) / ((i + 2) as f64).log2())
        .sum()
}

/// DCG@k with exponential gain.
pub fn dcg_at_k(grades: &[u8], k: usize) -> f64 {
    dcg_with_gain(grades, k, Gain::Exponential)
}

pub fn ideal_dcg(grades: &[u8], k: usize, gain: Gain) -> f64 {
    let mut sorted = grades.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    dcg_with_gain(&sorted, k, gain)
}

/// NDCG@k. A list whose ideal DCG is zero is ranked perfectly by any order
/// and scores 1.
pub fn ndcg_at_k(grades: &[u8], k: usize, gain: Gain) -> f64 {
    let ideal = ideal_dcg(grades, k, gain);
    if ideal > 0.0 {
        dcg_with_gain(grades, k, gain) / ideal
    } else {
        1.0
    }
}

/// Orders `(doc_id, score)` by score descending, ties by doc_id ascending.
pub fn rank_order<T: Scalar>(scored: &mut [(&str, T)]) {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
}

/// Run scores keyed by `(query_id, doc_id)`.
pub type RunScores<T> = BTreeMap<(String, String), T>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub dcg: f64,
    pub ndcg: f64,
    pub num_docs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub k: usize,
    pub per_query: Vec<QueryMetrics>,
    pub mean_dcg: f64,
    pub mean_ndcg: f64,
    pub num_queries: usize,
    /// Scored queries without any annotation.
    pub skipped_queries: usize,
}

/// Ranks each annotated query's documents by `scores` and computes DCG@k and
/// NDCG@k against `annotations`. Every annotated document must be scored;
/// scored documents without a grade are ranked with grade 0.
pub fn evaluate_run<T: Scalar>(
    run_id: &str,
    scores: &RunScores<T>,
    annotations: &Relevance,
    k: usize,
    gain: Gain,
) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if let Some((key, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s} for ({}, {})", key.0, key.1)));
    }
    for (q, d) in annotations.keys() {
        if !scores.contains_key(&(q.clone(), d.clone())) {
            return Err(Error::MissingKey {
                query_id: q.clone(),
                doc_id: d.clone(),
                source_name: format!("scores of run {run_id}"),
            });
        }
    }
    let annotated: BTreeSet<&str> = annotations.keys().map(|(q, _)| q.as_str()).collect();
    let mut by_query: BTreeMap<&str, Vec<(&str, T)>> = BTreeMap::new();
    for ((q, d), &s) in scores {
        by_query.entry(q).or_default().push((d, s));
    }
    let skipped = by_query.keys().filter(|q| !annotated.contains(*q)).count();
    let mut per_query = Vec::with_capacity(annotated.len());
    for q in annotated {
        let docs = by_query.get_mut(q).expect("annotated queries are scored");
        rank_order(docs);
        let grades: Vec<u8> = docs
            .iter()
            .map(|(d, _)| annotations.get(&(q.to_owned(), (*d).to_owned())).copied().unwrap_or(0))
            .collect();
        per_query.push(QueryMetrics {
            query_id: q.to_owned(),
            dcg: dcg_with_gain(&grades, k, gain),
            ndcg: ndcg_at_k(&grades, k, gain),
            num_docs: grades.len(),
        });
    }
    if skipped > 0 {
        log::warn!("{run_id}: {skipped} scored queries have no annotations and were skipped");
    }
    let n = per_query.len();
    let mean = |f: fn(&QueryMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_query.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(MetricsReport {
        run_id: run_id.to_owned(),
        k,
        mean_dcg: mean(|m| m.dcg),
        mean_ndcg: mean(|m| m.ndcg),
        num_queries: n,
        skipped_queries: skipped,
        per_query,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run {} ({} queries, {} skipped)", self.run_id, self.num_queries, self.skipped_queries)?;
        writeln!(f, "  DCG@{:<3} {:.5}", self.k, self.mean_dcg)?;
        write!(f, "  NDCG@{:<2} {:.5}", self.k, self.mean_ndcg)
    }
}

impl MetricsReport {
    /// `query_id \t dcg@k \t ndcg@k`, one line per query after a header.
    pub fn write_per_query(&self, path: &Path) -> Result<()> {
        let mut w = io_create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "query_id\tdcg@{k}\tndcg@{k}", k = self.k).map_err(io)?;
        for m in &self.per_query {
            writeln!(w, "{}\t{}\t{}", m.query_id, m.dcg, m.ndcg).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Side-by-side table of several reports.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.run_id.len()).max().unwrap_or(3).max(3);
    let k = reports.first().map_or(DEFAULT_K, |r| r.k);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>7}", "run", format!("DCG@{k}"), format!("NDCG@{k}"), "queries");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.5}  {:>9.5}  {:>7}",
            r.run_id, r.mean_dcg, r.mean_ndcg, r.num_queries
        );
    }
    out
}

/// `query_id \t doc_id \t score`
pub fn write_run_scores<T: Scalar>(path: &Path, scores: &RunScores<T>) -> Result<()> {
    let mut w = io_create(path)?;
    let io = |e| Error::io(path, e);
    for ((q, d), s) in scores {
        writeln!(w, "{q}\t{d}\t{s}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_run_scores<T: Scalar>(path: &Path) -> Result<RunScores<T>> {
    let mut out = RunScores::new();
    for (n, line) in io_read_lines(path)? {
        let f = io_fields(path, n, &line, 3)?;
        let s: f64 = f[2]
            .parse()
            .map_err(|_| Error::parse(path, n, format!("bad score {:?}", f[2])))?;
        if out.insert((f[0].to_owned(), f[1].to_owned()), T::of(s)).is_some() {
            return Err(Error::parse(path, n, "duplicate (query_id, doc_id)"));
        }
    }
    Ok(out)
}
