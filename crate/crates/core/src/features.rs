//! Exact-matching heuristic features: TF, IDF, TF-IDF, BM25 and query
//! likelihood under Dirichlet and Jelinek-Mercer smoothing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStats, Document, Query};
use crate::error::{Error, Result};
use crate::Scalar;

/// Column order of [`FeatureVector`] everywhere it is flattened.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "tf_sum",
    "idf_sum",
    "tfidf_sum",
    "bm25",
    "ql_dirichlet",
    "ql_jm",
    "query_len",
    "doc_len",
];

pub const NUM_FEATURES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureName {
    TfSum,
    IdfSum,
    TfidfSum,
    Bm25,
    QlDirichlet,
    QlJm,
    QueryLen,
    DocLen,
}

impl FeatureName {
    pub const ALL: [FeatureName; NUM_FEATURES] = [
        FeatureName::TfSum,
        FeatureName::IdfSum,
        FeatureName::TfidfSum,
        FeatureName::Bm25,
        FeatureName::QlDirichlet,
        FeatureName::QlJm,
        FeatureName::QueryLen,
        FeatureName::DocLen,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        FEATURE_NAMES[self.index()]
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FEATURE_NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| FeatureName::ALL[i])
            .ok_or_else(|| Error::invalid(format!("unknown feature {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub k1: f64,
    pub b: f64,
    pub mu: f64,
    pub lambda_jm: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            k1: 1.2,
            b: 0.75,
            mu: 2000.0,
            lambda_jm: 0.1,
        }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0) {
            return Err(Error::invalid("k1 must be positive"));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::invalid("b must lie in [0, 1]"));
        }
        if !(self.mu > 0.0) {
            return Err(Error::invalid("mu must be positive"));
        }
        if !(self.lambda_jm > 0.0 && self.lambda_jm < 1.0) {
            return Err(Error::invalid("lambda_jm must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector<T> {
    pub tf_sum: T,
    pub idf_sum: T,
    pub tfidf_sum: T,
    pub bm25: T,
    pub ql_dirichlet: T,
    pub ql_jm: T,
    pub query_len: T,
    pub doc_len: T,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn to_array(&self) -> [T; NUM_FEATURES] {
        [
            self.tf_sum,
            self.idf_sum,
            self.tfidf_sum,
            self.bm25,
            self.ql_dirichlet,
            self.ql_jm,
            self.query_len,
            self.doc_len,
        ]
    }

    pub fn from_array(a: [T; NUM_FEATURES]) -> Self {
        FeatureVector {
            tf_sum: a[0],
            idf_sum: a[1],
            tfidf_sum: a[2],
            bm25: a[3],
            ql_dirichlet: a[4],
            ql_jm: a[5],
            query_len: a[6],
            doc_len: a[7],
        }
    }

    pub fn get(&self, name: FeatureName) -> T {
        self.to_array()[name.index()]
    }
}

/// BM25-style IDF, `ln((N - df + 0.5) / (df + 0.5) + 1)`. Always positive.
pub fn idf<T: Scalar>(term: &str, stats: &CorpusStats) -> T {
    idf_from_counts(stats.num_docs, stats.doc_freq(term))
}

pub fn idf_from_counts<T: Scalar>(num_docs: usize, df: usize) -> T {
    let n = T::of_usize(num_docs);
    let df = T::of_usize(df);
    let half = T::of(0.5);
    ((n - df + half) / (df + half) + T::one()).ln()
}

fn length_norm<T: Scalar>(doc_len: usize, stats: &CorpusStats, params: &FeatureParams) -> T {
    if stats.avg_doc_len <= 0.0 {
        return T::one();
    }
    let b = T::of(params.b);
    T::one() - b + b * T::of_usize(doc_len) / T::of(stats.avg_doc_len)
}

pub fn bm25<T: Scalar>(
    query: &Query,
    doc: &Document,
    stats: &CorpusStats,
    params: &FeatureParams,
) -> T {
    let k1 = T::of(params.k1);
    let norm: T = length_norm(doc.len(), stats, params);
    query
        .tokens
        .iter()
        .map(|t| {
            let tf = doc.term_freq(t);
            if tf == 0 {
                return T::zero();
            }
            let tf = T::of_usize(tf);
            idf::<T>(t, stats) * tf * (k1 + T::one()) / (tf + k1 * norm)
        })
        .sum()
}

// p(t|C), floored at 0.5 / |C| for terms absent from the collection.
fn collection_prob<T: Scalar>(term: &str, stats: &CorpusStats) -> T {
    let ctf = stats.collection_tf(term);
    let num = if ctf == 0 { T::of(0.5) } else { T::of_usize(ctf) };
    num / T::of_usize(stats.total_terms)
}

/// Query log-likelihood with Dirichlet prior smoothing.
pub fn ql_dirichlet<T: Scalar>(
    query: &Query,
    doc: &Document,
    stats: &CorpusStats,
    params: &FeatureParams,
) -> Result<T> {
    if stats.total_terms == 0 {
        return Err(Error::EmptyCollection);
    }
    let mu = T::of(params.mu);
    let denom = T::of_usize(doc.len()) + mu;
    Ok(query
        .tokens
        .iter()
        .map(|t| {
            let tf = T::of_usize(doc.term_freq(t));
            ((tf + mu * collection_prob::<T>(t, stats)) / denom).ln()
        })
        .sum())
}

/// Query log-likelihood with Jelinek-Mercer interpolation.
pub fn ql_jelinek_mercer<T: Scalar>(
    query: &Query,
    doc: &Document,
    stats: &CorpusStats,
    params: &FeatureParams,
) -> Result<T> {
    if stats.total_terms == 0 {
        return Err(Error::EmptyCollection);
    }
    let lambda = T::of(params.lambda_jm);
    let len = doc.len();
    Ok(query
        .tokens
        .iter()
        .map(|t| {
            let doc_part = if len == 0 {
                T::zero()
            } else {
                T::of_usize(doc.term_freq(t)) / T::of_usize(len)
            };
            ((T::one() - lambda) * doc_part + lambda * collection_prob::<T>(t, stats)).ln()
        })
        .sum())
}

pub fn extract_features<T: Scalar>(
    query: &Query,
    doc: &Document,
    stats: &CorpusStats,
    params: &FeatureParams,
) -> Result<FeatureVector<T>> {
    let mut tf_sum = T::zero();
    let mut idf_sum = T::zero();
    let mut tfidf_sum = T::zero();
    for t in &query.tokens {
        let tf = doc.term_freq(t);
        if tf > 0 {
            let w: T = idf(t, stats);
            tf_sum += T::of_usize(tf);
            idf_sum += w;
            tfidf_sum += T::of_usize(tf) * w;
        }
    }
    Ok(FeatureVector {
        tf_sum,
        idf_sum,
        tfidf_sum,
        bm25: bm25(query, doc, stats, params),
        ql_dirichlet: ql_dirichlet(query, doc, stats, params)?,
        ql_jm: ql_jelinek_mercer(query, doc, stats, params)?,
        query_len: T::of_usize(query.tokens.len()),
        doc_len: T::of_usize(doc.len()),
    })
}

/// Feature rows keyed by `(query_id, doc_id)`.
pub type FeatureTable<T> = BTreeMap<(String, String), FeatureVector<T>>;

/// Writes `query_id \t doc_id \t <FEATURE_NAMES...>` with a header line.
pub fn write_feature_dump<T: Scalar>(path: &Path, table: &FeatureTable<T>) -> Result<()> {
    let mut w = crate::corpus::io_create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "query_id\tdoc_id\t{}", FEATURE_NAMES.join("\t")).map_err(io)?;
    for ((q, d), fv) in table {
        write!(w, "{q}\t{d}").map_err(io)?;
        for v in fv.to_array() {
            write!(w, "\t{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_feature_dump<T: Scalar>(path: &Path) -> Result<FeatureTable<T>> {
    let lines = crate::corpus::io_read_lines(path)?;
    let mut it = lines.iter();
    let expected_header = format!("query_id\tdoc_id\t{}", FEATURE_NAMES.join("\t"));
    match it.next() {
        Some((_, h)) if *h == expected_header => {}
        Some((n, _)) => return Err(Error::parse(path, *n, "unexpected feature dump header")),
        None => return Ok(FeatureTable::new()),
    }
    let mut table = FeatureTable::new();
    for (n, line) in it {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 2 + NUM_FEATURES {
            return Err(Error::parse(path, *n, "wrong number of columns"));
        }
        let mut vals = [T::zero(); NUM_FEATURES];
        for (v, s) in vals.iter_mut().zip(&f[2..]) {
            let x: f64 = s
                .parse()
                .map_err(|_| Error::parse(path, *n, format!("bad number {s:?}")))?;
            *v = T::of(x);
        }
        table.insert((f[0].to_owned(), f[1].to_owned()), FeatureVector::from_array(vals));
    }
    Ok(table)
}
