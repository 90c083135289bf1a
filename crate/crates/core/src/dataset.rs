//! Shared (query, document) lookup: features and scorer inputs.

use std::collections::BTreeMap;

use crate::corpus::{build_corpus_stats, Corpus, CorpusStats, Document, Query};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureParams, FeatureVector};
use crate::neural::{Example, Vocab};
use crate::Scalar;

/// Corpus, queries and the statistics needed to featurize any pair.
#[derive(Debug, Clone)]
pub struct Featurizer {
    pub corpus: Corpus,
    pub queries: BTreeMap<String, Query>,
    pub stats: CorpusStats,
    pub params: FeatureParams,
}

impl Featurizer {
    pub fn new(corpus: Corpus, queries: impl IntoIterator<Item = Query>, params: FeatureParams) -> Result<Self> {
        params.validate()?;
        let stats = build_corpus_stats(corpus.docs())?;
        Ok(Featurizer {
            corpus,
            queries: queries.into_iter().map(|q| (q.query_id.clone(), q)).collect(),
            stats,
            params,
        })
    }

    pub fn query(&self, query_id: &str) -> Result<&Query> {
        self.queries.get(query_id).ok_or_else(|| Error::MissingKey {
            query_id: query_id.to_owned(),
            doc_id: String::new(),
            source_name: "queries".into(),
        })
    }

    pub fn doc(&self, query_id: &str, doc_id: &str) -> Result<&Document> {
        self.corpus.get(doc_id).ok_or_else(|| Error::MissingKey {
            query_id: query_id.to_owned(),
            doc_id: doc_id.to_owned(),
            source_name: "corpus".into(),
        })
    }

    pub fn features<T: Scalar>(&self, query_id: &str, doc_id: &str) -> Result<FeatureVector<T>> {
        extract_features(self.query(query_id)?, self.doc(query_id, doc_id)?, &self.stats, &self.params)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_corpus(self.corpus.docs(), self.queries.values())
    }

    pub fn example<T: Scalar>(&self, query_id: &str, doc_id: &str, vocab: &Vocab, max_seq_len: usize) -> Result<Example<T>> {
        let fv = self.features(query_id, doc_id)?;
        Ok(Example::new(
            self.query(query_id)?,
            self.doc(query_id, doc_id)?,
            &fv,
            vocab,
            max_seq_len,
        ))
    }
}

/// Scores every `(query_id, doc_id)` in `keys` with `scorer`.
pub fn score_pairs<'k, T: Scalar>(
    scorer: &crate::neural::WideDeepScorer<T>,
    data: &Featurizer,
    vocab: &Vocab,
    keys: impl IntoIterator<Item = &'k (String, String)>,
) -> Result<crate::eval::RunScores<T>> {
    let keys: Vec<&(String, String)> = keys.into_iter().collect();
    let examples = keys
        .iter()
        .map(|(q, d)| data.example(q, d, vocab, scorer.config.max_seq_len))
        .collect::<Result<Vec<_>>>()?;
    let scores = crate::neural::score_batch(scorer, &examples)?;
    Ok(keys.into_iter().cloned().zip(scores).collect())
}
