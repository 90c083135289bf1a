//! Click + heuristic-feature label refinement.

use serde::{Deserialize, Serialize};

use crate::clicklog::ClickSession;
use crate::error::{Error, Result};
use crate::scalar::softmax;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedEntry<T> {
    pub doc_id: String,
    /// 1-based logged position; `None` for injected negatives.
    pub position: Option<usize>,
    pub click: bool,
    /// Refinement feature value (raw, before min-max normalisation).
    pub feature: T,
    /// Pre-softmax label `δ·c + f̂` (0 for random negatives).
    pub raw_label: T,
    /// Softmax target; the targets of a list sum to one.
    pub target: T,
    pub is_random_negative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedList<T> {
    pub query_id: String,
    pub entries: Vec<RefinedEntry<T>>,
}

/// Min-max normalisation within a list; a constant list maps to 0.5.
pub fn min_max<T: Scalar>(values: &[T]) -> Vec<T> {
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    if !(span > T::zero()) {
        return vec![T::of(0.5); values.len()];
    }
    values.iter().map(|&v| (v - lo) / span).collect()
}

/// Raw labels `y = δ·c + minmax(f)`.
pub fn raw_labels<T: Scalar>(clicks: &[bool], features: &[T], delta: T) -> Result<Vec<T>> {
    if clicks.len() != features.len() {
        return Err(Error::LengthMismatch {
            what: "clicks vs feature values",
            left: clicks.len(),
            right: features.len(),
        });
    }
    if clicks.is_empty() {
        return Err(Error::invalid("cannot refine an empty list"));
    }
    Ok(clicks
        .iter()
        .zip(min_max(features))
        .map(|(&c, f)| if c { delta + f } else { f })
        .collect())
}

/// `softmax(y / τ)`.
pub fn tempered_softmax<T: Scalar>(raw: &[T], tau: T) -> Result<Vec<T>> {
    if !(tau > T::zero()) {
        return Err(Error::invalid("tau must be positive"));
    }
    let scaled: Vec<T> = raw.iter().map(|&y| y / tau).collect();
    Ok(softmax(&scaled))
}

/// Refined soft targets for one logged list: `softmax((δ·c + minmax(f)) / τ)`.
pub fn refine_labels<T: Scalar>(clicks: &[bool], features: &[T], delta: T, tau: T) -> Result<Vec<T>> {
    if !(tau > T::zero()) {
        return Err(Error::invalid("tau must be positive"));
    }
    tempered_softmax(&raw_labels(clicks, features, delta)?, tau)
}

impl<T: Scalar> RefinedList<T> {
    /// Builds the list for a logged session. `features[i]` is the refinement
    /// feature of the document at position `i + 1`.
    pub fn from_session(session: &ClickSession, features: &[T], delta: T, tau: T) -> Result<Self> {
        let raw = raw_labels(&session.clicks, features, delta)?;
        let mut list = RefinedList {
            query_id: session.query_id.clone(),
            entries: session
                .ranked_doc_ids
                .iter()
                .zip(&session.clicks)
                .zip(features.iter().zip(raw))
                .enumerate()
                .map(|(i, ((d, &c), (&f, y)))| RefinedEntry {
                    doc_id: d.clone(),
                    position: Some(i + 1),
                    click: c,
                    feature: f,
                    raw_label: y,
                    target: T::zero(),
                    is_random_negative: false,
                })
                .collect(),
        };
        list.normalize_targets(tau)?;
        Ok(list)
    }

    /// Recomputes targets as `softmax(raw_label / τ)` over every entry,
    /// random negatives included.
    pub fn normalize_targets(&mut self, tau: T) -> Result<()> {
        let raw: Vec<T> = self.entries.iter().map(|e| e.raw_label).collect();
        for (e, t) in self.entries.iter_mut().zip(tempered_softmax(&raw, tau)?) {
            e.target = t;
        }
        Ok(())
    }

    pub fn targets(&self) -> Vec<T> {
        self.entries.iter().map(|e| e.target).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
