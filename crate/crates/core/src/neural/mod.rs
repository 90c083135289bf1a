//! The wide-and-deep neural ranker: input encoding, a from-scratch
//! transformer cross-encoder with exact reverse-mode gradients, AdamW,
//! finite-difference gradient checking and checkpoints.

mod checkpoint;
mod gradcheck;
mod model;
mod optim;
mod tensor;

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Query};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, NUM_FEATURES};
use crate::seed;
use crate::Scalar;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_slice, relative_error, GradCheckReport};
pub use model::{EncoderLayer, LayerNorm, Linear, WideDeepScorer};
pub use optim::{adamw_step, AdamWConfig, OptimizerState, Parameters};
pub use tensor::Tensor;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_RESERVED: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub feature_proj_dim: usize,
    pub mlp_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub num_features: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            vocab_size: NUM_RESERVED,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 64,
            max_seq_len: 64,
            feature_proj_dim: 16,
            mlp_dims: vec![32, 1],
            dropout_rate: 0.0,
            num_features: NUM_FEATURES,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < NUM_RESERVED {
            return Err(Error::invalid("vocab_size must cover the reserved ids"));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid("embed_dim must be a positive multiple of num_heads"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must hold [CLS] and [SEP]"));
        }
        if self.mlp_dims.last() != Some(&1) || self.mlp_dims.contains(&0) {
            return Err(Error::invalid("mlp_dims must be positive and end in 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub(crate) fn mlp_shapes(&self) -> Vec<(usize, usize)> {
        let mut inputs = self.embed_dim + self.feature_proj_dim;
        self.mlp_dims
            .iter()
            .map(|&o| {
                let s = (inputs, o);
                inputs = o;
                s
            })
            .collect()
    }

    /// `V·D + L·D + layers·(4D² + 2DF + 9D + F) + 2D + NF·P + P + Σ (in·out + out)`
    /// over MLP layers.
    pub fn num_parameters(&self) -> usize {
        let (v, d, l, f) = (self.vocab_size, self.embed_dim, self.max_seq_len, self.ff_dim);
        let per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
        let mlp: usize = self.mlp_shapes().iter().map(|(i, o)| i * o + o).sum();
        v * d
            + l * d
            + self.num_layers * per_layer
            + 2 * d
            + self.num_features * self.feature_proj_dim
            + self.feature_proj_dim
            + mlp
    }
}

/// Term ↔ id mapping. Ids below [`NUM_RESERVED`] are the special tokens.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    terms: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(terms: Vec<String>) -> Self {
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + NUM_RESERVED) as u32))
            .collect();
        Vocab { terms, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.terms
    }
}

impl Vocab {
    /// Every distinct document and query term, sorted.
    pub fn from_corpus<'a>(
        docs: impl IntoIterator<Item = &'a Document>,
        queries: impl IntoIterator<Item = &'a Query>,
    ) -> Self {
        let mut set: BTreeSet<&str> = BTreeSet::new();
        for d in docs {
            set.extend(d.terms());
        }
        for q in queries {
            set.extend(q.tokens.iter().map(String::as_str));
        }
        Vocab::from(set.into_iter().map(str::to_owned).collect::<Vec<_>>())
    }

    pub fn id(&self, term: &str) -> u32 {
        self.index.get(term).copied().unwrap_or(UNK)
    }

    /// Number of ids including the reserved ones.
    pub fn size(&self) -> usize {
        self.terms.len() + NUM_RESERVED
    }
}

/// `[CLS] query [SEP] doc`, truncated to `max_seq_len` (document first) and
/// right-padded with `[PAD]`.
pub fn encode_pair<Q, D>(query_tokens: Q, doc_tokens: D, vocab: &Vocab, max_seq_len: usize) -> Vec<u32>
where
    Q: IntoIterator,
    Q::Item: AsRef<str>,
    D: IntoIterator,
    D::Item: AsRef<str>,
{
    let budget = max_seq_len.saturating_sub(2);
    let q: Vec<u32> = query_tokens
        .into_iter()
        .take(budget)
        .map(|t| vocab.id(t.as_ref()))
        .collect();
    let room = budget - q.len();
    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(CLS);
    ids.extend(q);
    ids.push(SEP);
    ids.extend(doc_tokens.into_iter().take(room).map(|t| vocab.id(t.as_ref())));
    ids.resize(max_seq_len, PAD);
    ids.truncate(max_seq_len);
    ids
}

/// Maps raw features to `sign(x)·ln(1 + |x|)` before the wide projection.
pub fn squash_features<T: Scalar>(fv: &FeatureVector<T>) -> Vec<T> {
    fv.to_array()
        .iter()
        .map(|&x| x.signum() * x.abs().ln_1p())
        .collect()
}

/// One scorer input: encoded token ids and dense wide features.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub ids: Vec<u32>,
    pub features: Vec<T>,
}

impl<T: Scalar> Example<T> {
    pub fn new(query: &Query, doc: &Document, features: &FeatureVector<T>, vocab: &Vocab, max_seq_len: usize) -> Self {
        Example {
            ids: encode_pair(&query.tokens, doc.terms(), vocab, max_seq_len),
            features: squash_features(features),
        }
    }
}

// Examples per gradient accumulator. Fixed so that the summation order, and
// therefore the result, does not depend on the thread count.
const CHUNK: usize = 16;

/// Scores a batch. Parallel across examples; results are in input order.
pub fn score_batch<T: Scalar>(params: &WideDeepScorer<T>, batch: &[Example<T>]) -> Result<Vec<T>> {
    params.check_finite()?;
    batch
        .par_iter()
        .map(|ex| params.forward(&ex.ids, &ex.features, None).map(|(s, _)| s))
        .collect()
}

/// Loss on a batch and its exact gradient with respect to every parameter.
///
/// `loss_fn` receives the batch scores and returns the loss together with
/// `∂loss/∂score` for each example.
pub fn forward_backward<T, F>(params: &WideDeepScorer<T>, batch: &[Example<T>], loss_fn: F) -> Result<(T, WideDeepScorer<T>)>
where
    T: Scalar,
    F: FnOnce(&[T]) -> Result<(T, Vec<T>)>,
{
    forward_backward_impl(params, batch, loss_fn, None)
}

/// As [`forward_backward`], with dropout active (when configured) using
/// masks drawn from `step_seed`.
pub fn forward_backward_train<T, F>(
    params: &WideDeepScorer<T>,
    batch: &[Example<T>],
    loss_fn: F,
    step_seed: u64,
) -> Result<(T, WideDeepScorer<T>)>
where
    T: Scalar,
    F: FnOnce(&[T]) -> Result<(T, Vec<T>)>,
{
    forward_backward_impl(params, batch, loss_fn, Some(step_seed))
}

fn forward_backward_impl<T, F>(
    params: &WideDeepScorer<T>,
    batch: &[Example<T>],
    loss_fn: F,
    step_seed: Option<u64>,
) -> Result<(T, WideDeepScorer<T>)>
where
    T: Scalar,
    F: FnOnce(&[T]) -> Result<(T, Vec<T>)>,
{
    params.check_finite()?;
    let forwards = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = step_seed.map(|s| seed::rng(s, "dropout", i as u64));
            params.forward(&ex.ids, &ex.features, rng.as_mut())
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<T> = forwards.iter().map(|(s, _)| *s).collect();
    let (loss, dscores) = loss_fn(&scores)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss ({loss})")));
    }
    if dscores.len() != batch.len() {
        return Err(Error::LengthMismatch {
            what: "loss gradient vs batch",
            left: dscores.len(),
            right: batch.len(),
        });
    }
    let partials: Vec<WideDeepScorer<T>> = forwards
        .par_chunks(CHUNK)
        .zip(dscores.par_chunks(CHUNK))
        .map(|(fw, ds)| {
            let mut g = WideDeepScorer::zeros(&params.config);
            for ((_, cache), &d) in fw.iter().zip(ds) {
                if d != T::zero() {
                    params.backward(cache, d, &mut g);
                }
            }
            g
        })
        .collect();
    let mut grads = WideDeepScorer::zeros(&params.config);
    for g in &partials {
        grads.add_assign(g);
    }
    Ok((loss, grads))
}

/// Loss only, for finite differences.
pub fn loss_only<T, F>(params: &WideDeepScorer<T>, batch: &[Example<T>], loss_fn: F) -> Result<T>
where
    T: Scalar,
    F: FnOnce(&[T]) -> Result<(T, Vec<T>)>,
{
    let scores = score_batch(params, batch)?;
    Ok(loss_fn(&scores)?.0)
}
