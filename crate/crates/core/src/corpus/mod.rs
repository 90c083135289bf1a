//! Documents, queries, corpus statistics and the synthetic data generator.

mod io;
mod synth;
mod tokenize;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    read_documents, read_queries, read_relevance, write_documents, write_queries,
    write_relevance,
};
pub use synth::{generate_synthetic_corpus, SynthConfig, SynthCorpus, BUCKET_GRADE_DISTRIBUTION};
pub use tokenize::tokenize;

pub(crate) use io::{create as io_create, fields as io_fields, read_lines as io_read_lines};

/// Graded relevance judgments keyed by `(query_id, doc_id)`.
pub type Relevance = BTreeMap<(String, String), u8>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title_tokens: Vec<String>,
    pub content_tokens: Vec<String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, title: &str, content: &str) -> Self {
        Document {
            doc_id: doc_id.into(),
            title_tokens: tokenize(title),
            content_tokens: tokenize(content),
        }
    }

    /// Title followed by content.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.title_tokens
            .iter()
            .chain(&self.content_tokens)
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.title_tokens.len() + self.content_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Occurrences of `term` in title and content.
    pub fn term_freq(&self, term: &str) -> usize {
        self.terms().filter(|t| *t == term).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FreqBucket {
    High,
    Mid,
    Low,
}

impl FreqBucket {
    pub const ALL: [FreqBucket; 3] = [FreqBucket::High, FreqBucket::Mid, FreqBucket::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            FreqBucket::High => "high",
            FreqBucket::Mid => "mid",
            FreqBucket::Low => "low",
        }
    }
}

impl fmt::Display for FreqBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreqBucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(FreqBucket::High),
            "mid" => Ok(FreqBucket::Mid),
            "low" => Ok(FreqBucket::Low),
            other => Err(Error::invalid(format!("unknown frequency bucket {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub tokens: Vec<String>,
    pub freq_bucket: FreqBucket,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: &str, freq_bucket: FreqBucket) -> Self {
        Query {
            query_id: query_id.into(),
            tokens: tokenize(text),
            freq_bucket,
        }
    }
}

/// Documents indexed by id. Ids are non-empty and unique.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.doc_id.is_empty() {
                return Err(Error::invalid(format!("document #{i} has an empty doc_id")));
            }
            if index.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate doc_id {:?}", d.doc_id)));
            }
        }
        Ok(Corpus { docs, index })
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.index.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub avg_doc_len: f64,
    pub total_terms: usize,
    pub doc_freq: HashMap<String, usize>,
    pub collection_tf: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn collection_tf(&self, term: &str) -> usize {
        self.collection_tf.get(term).copied().unwrap_or(0)
    }
}

/// Document frequencies, collection term frequencies and length statistics
/// over title+content of every document.
pub fn build_corpus_stats<'a, I>(docs: I) -> Result<CorpusStats>
where
    I: IntoIterator<Item = &'a Document>,
{
    let mut num_docs = 0usize;
    let mut total_terms = 0usize;
    let mut doc_freq: HashMap<String, usize> = HashMap::new();
    let mut collection_tf: HashMap<String, usize> = HashMap::new();
    let mut seen: Vec<&str> = Vec::new();
    for doc in docs {
        num_docs += 1;
        seen.clear();
        for term in doc.terms() {
            total_terms += 1;
            *collection_tf.entry(term.to_owned()).or_default() += 1;
            seen.push(term);
        }
        seen.sort_unstable();
        seen.dedup();
        for term in &seen {
            *doc_freq.entry((*term).to_owned()).or_default() += 1;
        }
    }
    if num_docs == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(CorpusStats {
        num_docs,
        avg_doc_len: total_terms as f64 / num_docs as f64,
        total_terms,
        doc_freq,
        collection_tf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, terms: &[&str]) -> Document {
        Document {
            doc_id: id.into(),
            title_tokens: vec![],
            content_tokens: terms.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn counts_by_hand() {
        let docs = [doc("d1", &["a", "b"]), doc("d2", &["a"])];
        let s = build_corpus_stats(&docs).unwrap();
        assert_eq!(s.num_docs, 2);
        assert_eq!(s.doc_freq("a"), 2);
        assert_eq!(s.doc_freq("b"), 1);
        assert_eq!(s.avg_doc_len, 1.5);
    }

    #[test]
    fn degenerate_doc() {
        let s = build_corpus_stats(&[doc("d1", &[])]).unwrap();
        assert_eq!(s.num_docs, 1);
        assert_eq!(s.avg_doc_len, 0.0);
        assert!(s.doc_freq.is_empty());
    }

    #[test]
    fn df_counts_documents_not_occurrences() {
        let s = build_corpus_stats(&[doc("d1", &["a", "a"])]).unwrap();
        assert_eq!(s.doc_freq("a"), 1);
        assert_eq!(s.collection_tf("a"), 2);
    }

    #[test]
    fn title_and_content_are_both_counted() {
        let d = Document::new("d", "Alpha beta", "beta gamma");
        let s = build_corpus_stats([&d]).unwrap();
        assert_eq!(s.total_terms, 4);
        assert_eq!(s.doc_freq("beta"), 1);
        assert_eq!(s.collection_tf("beta"), 2);
        assert_eq!(d.term_freq("beta"), 2);
    }

    #[test]
    fn empty_collection_is_an_error() {
        let none: Vec<Document> = vec![];
        assert!(matches!(build_corpus_stats(&none), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn corpus_rejects_duplicate_and_empty_ids() {
        assert!(Corpus::new(vec![doc("a", &[]), doc("a", &[])]).is_err());
        assert!(Corpus::new(vec![doc("", &[])]).is_err());
        let c = Corpus::new(vec![doc("a", &["x"]), doc("b", &[])]).unwrap();
        assert_eq!(c.get("a").unwrap().len(), 1);
        assert!(c.get("zz").is_none());
    }

    proptest! {
        #[test]
        fn stats_invariants(lens in proptest::collection::vec(proptest::collection::vec(0u8..6, 0..12), 1..20)) {
            let docs: Vec<Document> = lens.iter().enumerate().map(|(i, ts)| Document {
                doc_id: format!("d{i}"),
                title_tokens: vec![],
                content_tokens: ts.iter().map(|t| format!("t{t}")).collect(),
            }).collect();
            let s = build_corpus_stats(&docs).unwrap();
            let total: usize = docs.iter().map(Document::len).sum();
            prop_assert_eq!(s.total_terms, total);
            let recon = s.avg_doc_len * s.num_docs as f64;
            prop_assert!((recon - total as f64).abs() <= f64::EPSILON * total.max(1) as f64 * 2.0);
            for &df in s.doc_freq.values() {
                prop_assert!(df <= s.num_docs);
            }
        }
    }
}
