//! Annotated examples: binarization, grouping, duplication and splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{io_create, io_fields, io_read_lines, FreqBucket, Relevance};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub query_id: String,
    pub doc_id: String,
    pub grade: u8,
    pub freq_bucket: FreqBucket,
}

/// Positive iff the grade is at least 2 ("good").
pub fn binarize(grade: u8) -> Result<bool> {
    if grade > 4 {
        return Err(Error::invalid(format!("grade {grade} outside 0..=4")));
    }
    Ok(grade >= 2)
}

/// Grades keyed by `(query_id, doc_id)`; rejects out-of-range grades and
/// repeated pairs.
pub fn annotations_to_relevance(examples: &[AnnotatedExample]) -> Result<Relevance> {
    let mut rel = Relevance::new();
    for a in examples {
        binarize(a.grade)?;
        if rel.insert((a.query_id.clone(), a.doc_id.clone()), a.grade).is_some() {
            return Err(Error::invalid(format!(
                "annotation ({}, {}) appears twice",
                a.query_id, a.doc_id
            )));
        }
    }
    Ok(rel)
}

/// `query_id \t doc_id \t grade \t freq_bucket`
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotatedExample>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in io_read_lines(path)? {
        let f = io_fields(path, n, &line, 4)?;
        let grade: u8 = f[2]
            .parse()
            .ok()
            .filter(|g| *g <= 4)
            .ok_or_else(|| Error::parse(path, n, format!("grade {:?} is not in 0..=4", f[2])))?;
        let freq_bucket = f[3].parse().map_err(|_| Error::parse(path, n, format!("bad freq_bucket {:?}", f[3])))?;
        if !seen.insert((f[0].to_owned(), f[1].to_owned())) {
            return Err(Error::parse(path, n, "duplicate (query_id, doc_id)"));
        }
        out.push(AnnotatedExample {
            query_id: f[0].to_owned(),
            doc_id: f[1].to_owned(),
            grade,
            freq_bucket,
        });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, examples: &[AnnotatedExample]) -> Result<()> {
    let mut w = io_create(path)?;
    let io = |e| Error::io(path, e);
    for a in examples {
        writeln!(w, "{}\t{}\t{}\t{}", a.query_id, a.doc_id, a.grade, a.freq_bucket).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `T − 1` negatives followed by one positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub query_id: String,
    pub doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSample {
    pub groups: Vec<Group>,
    /// Queries without a positive or without a negative.
    pub skipped: usize,
}

/// Samples `groups_per_query` groups of size `group_size` per query, times the
/// number of copies of the query in `examples` (see
/// [`duplicate_head_queries`]). The positive is uniform over the query's
/// positives; the negatives are uniform over its negatives, without
/// replacement when there are enough. Each query draws from its own stream.
pub fn sample_groups(
    examples: &[AnnotatedExample],
    group_size: usize,
    groups_per_query: usize,
    seed: u64,
) -> Result<GroupSample> {
    if group_size < 2 {
        return Err(Error::invalid("group size must be at least 2"));
    }
    let mut by_query: BTreeMap<&str, (BTreeMap<&str, bool>, usize)> = BTreeMap::new();
    for a in examples {
        let entry = by_query.entry(&a.query_id).or_default();
        entry.0.insert(&a.doc_id, binarize(a.grade)?);
        entry.1 += 1;
    }
    let mut out = GroupSample {
        groups: Vec::new(),
        skipped: 0,
    };
    for (q, (docs, rows)) in by_query {
        let pos: Vec<&str> = docs.iter().filter(|(_, &p)| p).map(|(d, _)| *d).collect();
        let neg: Vec<&str> = docs.iter().filter(|(_, &p)| !p).map(|(d, _)| *d).collect();
        if pos.is_empty() || neg.is_empty() {
            out.skipped += 1;
            continue;
        }
        let copies = (rows / docs.len()).max(1);
        let mut rng = seed::rng(seed::derive(seed, "sample-groups", 0), q, 0);
        let k = group_size - 1;
        for _ in 0..groups_per_query * copies {
            let p = pos[rng.gen_range(0..pos.len())];
            let mut ids: Vec<String> = if neg.len() >= k {
                sample(&mut rng, neg.len(), k).into_iter().map(|i| neg[i].to_owned()).collect()
            } else {
                (0..k).map(|_| neg[rng.gen_range(0..neg.len())].to_owned()).collect()
            };
            ids.push(p.to_owned());
            out.groups.push(Group {
                query_id: q.to_owned(),
                doc_ids: ids,
            });
        }
    }
    if out.skipped > 0 {
        log::debug!("{} queries without both classes skipped", out.skipped);
    }
    Ok(out)
}

/// Repeats every example of a high-frequency query `factor` times, then
/// shuffles. `factor = 1` returns the input as is.
pub fn duplicate_head_queries(dataset: Vec<AnnotatedExample>, factor: usize, seed: u64) -> Vec<AnnotatedExample> {
    if factor <= 1 {
        return dataset;
    }
    let mut out = Vec::with_capacity(dataset.len());
    for a in dataset {
        let n = if a.freq_bucket == FreqBucket::High { factor } else { 1 };
        out.extend(std::iter::repeat_n(a, n));
    }
    out.shuffle(&mut seed::rng(seed, "head-duplication", 0));
    out
}

/// Splits at query granularity: `round(ratio · #queries)` queries (at least
/// one on each side when there are two or more) go to the first part.
/// Row order within each part is preserved.
pub fn split_by_query(
    dataset: &[AnnotatedExample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<AnnotatedExample>, Vec<AnnotatedExample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split ratio must lie in (0, 1)"));
    }
    let mut queries: Vec<&str> = dataset
        .iter()
        .map(|a| a.query_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    queries.shuffle(&mut seed::rng(seed, "query-split", 0));
    let n = queries.len();
    let mut n_train = (ratio * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let train: BTreeSet<&str> = queries[..n_train.min(n)].iter().copied().collect();
    let (a, b): (Vec<_>, Vec<_>) = dataset.iter().cloned().partition(|a| train.contains(a.query_id.as_str()));
    Ok((a, b))
}

/// Every graded (query, doc) of a synthetic corpus as an annotation.
pub fn synthetic_annotations(synth: &crate::corpus::SynthCorpus) -> Vec<AnnotatedExample> {
    let buckets: BTreeMap<&str, FreqBucket> = synth
        .queries
        .iter()
        .map(|q| (q.query_id.as_str(), q.freq_bucket))
        .collect();
    synth
        .relevance
        .iter()
        .map(|((q, d), &g)| AnnotatedExample {
            query_id: q.clone(),
            doc_id: d.clone(),
            grade: g,
            freq_bucket: buckets.get(q.as_str()).copied().unwrap_or(FreqBucket::Low),
        })
        .collect()
}
