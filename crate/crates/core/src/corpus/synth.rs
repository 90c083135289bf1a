use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Document, FreqBucket, Query, Relevance};
use crate::error::{Error, Result};
use crate::seed;

/// Relevance-grade proportions (grade 0..=4) for high, mid and low frequency
/// queries of the annotated set the generator is calibrated to.
pub const BUCKET_GRADE_DISTRIBUTION: [[f64; 5]; 3] = [
    [0.3550, 0.1596, 0.3506, 0.1299, 0.0049],
    [0.5113, 0.0940, 0.3132, 0.0800, 0.0015],
    [0.7078, 0.0516, 0.2133, 0.0271, 0.0002],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub num_queries: usize,
    pub docs_per_query: usize,
    pub query_len: (usize, usize),
    pub title_len: (usize, usize),
    pub content_len: (usize, usize),
    /// Relative number of high, mid and low frequency queries.
    pub bucket_weights: [f64; 3],
    /// Per-bucket grade distribution, rows in `FreqBucket::ALL` order.
    pub grade_distribution: [[f64; 5]; 3],
    /// Probability that a given query term appears in a document of each grade.
    pub term_match_prob: [f64; 5],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 2000,
            num_queries: 500,
            docs_per_query: 20,
            query_len: (2, 4),
            title_len: (2, 4),
            content_len: (8, 40),
            bucket_weights: [1092.0, 1820.0, 1789.0],
            grade_distribution: BUCKET_GRADE_DISTRIBUTION,
            term_match_prob: [0.1, 0.3, 0.55, 0.75, 0.95],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
    pub relevance: Relevance,
}

impl SynthCorpus {
    /// Candidate doc ids of `query_id`, in generation order.
    pub fn candidates(&self, query_id: &str) -> Vec<&str> {
        self.relevance
            .range((query_id.to_owned(), String::new())..)
            .take_while(|((q, _), _)| q == query_id)
            .map(|((_, d), _)| d.as_str())
            .collect()
    }
}

fn check(cfg: &SynthConfig) -> Result<()> {
    if cfg.docs_per_query == 0 {
        return Err(Error::invalid("docs_per_query must be positive"));
    }
    if cfg.vocab_size < cfg.query_len.1.max(1) {
        return Err(Error::invalid("vocab_size smaller than the longest query"));
    }
    for (name, (lo, hi)) in [
        ("query_len", cfg.query_len),
        ("title_len", cfg.title_len),
        ("content_len", cfg.content_len),
    ] {
        if lo > hi {
            return Err(Error::invalid(format!("{name}: min {lo} exceeds max {hi}")));
        }
    }
    if cfg.query_len.0 == 0 {
        return Err(Error::invalid("queries need at least one term"));
    }
    if cfg.term_match_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("term_match_prob entries must lie in [0, 1]"));
    }
    Ok(())
}

fn term(k: usize) -> String {
    format!("w{k}")
}

/// Generates queries, a per-query candidate pool of documents, and graded
/// ground truth. Documents of higher grade contain more of their query's
/// terms; everything else is uniform filler from the vocabulary.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    check(cfg)?;
    let buckets = WeightedIndex::new(cfg.bucket_weights)
        .map_err(|e| Error::invalid(format!("bucket_weights: {e}")))?;
    let grades = cfg
        .grade_distribution
        .iter()
        .map(WeightedIndex::new)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::invalid(format!("grade_distribution: {e}")))?;

    let width = cfg.num_queries.max(1).to_string().len();
    let mut documents = Vec::with_capacity(cfg.num_queries * cfg.docs_per_query);
    let mut queries = Vec::with_capacity(cfg.num_queries);
    let mut relevance = Relevance::new();

    for qi in 0..cfg.num_queries {
        let mut rng = seed::rng(seed, "synth-query", qi as u64);
        let bucket = FreqBucket::ALL[buckets.sample(&mut rng)];
        let qlen = rng.gen_range(cfg.query_len.0..=cfg.query_len.1);
        let qterms: Vec<usize> = sample(&mut rng, cfg.vocab_size, qlen).into_vec();
        let query_id = format!("q{qi:0width$}");
        queries.push(Query {
            query_id: query_id.clone(),
            tokens: qterms.iter().map(|&k| term(k)).collect(),
            freq_bucket: bucket,
        });

        let grade_dist = &grades[bucket as usize];
        for di in 0..cfg.docs_per_query {
            let grade = grade_dist.sample(&mut rng);
            let p = cfg.term_match_prob[grade];
            let filler = |rng: &mut seed::Rng, n: usize| -> Vec<String> {
                (0..n).map(|_| term(rng.gen_range(0..cfg.vocab_size))).collect()
            };

            let tlen = rng.gen_range(cfg.title_len.0..=cfg.title_len.1);
            let mut title = filler(&mut rng, tlen);
            let clen = rng.gen_range(cfg.content_len.0..=cfg.content_len.1);
            let mut content = filler(&mut rng, clen);
            for &k in &qterms {
                if rng.gen_bool(p) {
                    let reps = 1 + rng.gen_range(0..=grade.min(2));
                    for _ in 0..reps {
                        let at = rng.gen_range(0..=content.len());
                        content.insert(at, term(k));
                    }
                }
                if !title.is_empty() && rng.gen_bool(p * 0.5) {
                    let at = rng.gen_range(0..title.len());
                    title[at] = term(k);
                }
            }

            let doc_id = format!("{query_id}-d{di:02}");
            relevance.insert((query_id.clone(), doc_id.clone()), grade as u8);
            documents.push(Document {
                doc_id,
                title_tokens: title,
                content_tokens: content,
            });
        }
    }
    Ok(SynthCorpus {
        documents,
        queries,
        relevance,
    })
}
