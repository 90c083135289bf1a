//! Dual learning: a per-position examination model trained jointly with the
//! ranker, each providing the debiasing weights of the other.

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, softmax};
use crate::Scalar;

use super::losses::{listwise_loss, LossForm};

/// Ceiling on the inverse relevance weights of the propensity objective.
pub const MAX_RELEVANCE_WEIGHT: f64 = 100.0;

/// Inverse examination weights `e_1 / e_pos` with `e = softmax(logits)`;
/// random negatives (`None`) get 1.
pub fn examination_weights<T: Scalar>(logits: &[T], positions: &[Option<usize>]) -> Result<Vec<T>> {
    positions
        .iter()
        .map(|p| match p {
            None => Ok(T::one()),
            Some(p) if (1..=logits.len()).contains(p) => Ok((logits[0] - logits[p - 1]).exp()),
            Some(p) => Err(Error::invalid(format!("position {p} has no logit"))),
        })
        .collect()
}

/// Ranker objective: listwise-log loss with inverse examination weights.
/// Gradient is with respect to the scores; the logits are held fixed.
pub fn dla_ranker_loss<T: Scalar>(
    scores: &[T],
    targets: &[T],
    positions: &[Option<usize>],
    logits: &[T],
) -> Result<(T, Vec<T>)> {
    let w = examination_weights(logits, positions)?;
    listwise_loss(scores, targets, &w, LossForm::Log)
}

/// Inverse relevance weights `r_first / r_j` with `r = softmax(scores)` over
/// the shown documents and `r_first` the one logged highest. Capped at
/// [`MAX_RELEVANCE_WEIGHT`]; random negatives get 1.
pub fn relevance_weights<T: Scalar>(scores: &[T], positions: &[Option<usize>]) -> Vec<T> {
    let shown: Vec<usize> = (0..scores.len()).filter(|&i| positions[i].is_some()).collect();
    let mut w = vec![T::one(); scores.len()];
    let Some(&first) = shown.iter().min_by_key(|&&i| positions[i]) else {
        return w;
    };
    let cap = T::of(MAX_RELEVANCE_WEIGHT);
    // r_first / r_j = exp(s_first − s_j); the normaliser cancels.
    for &i in &shown {
        w[i] = (scores[first] - scores[i]).exp().min(cap);
    }
    w
}

/// Propensity objective for one list: `−Σ_j w_j·ỹ_j·ln softmax(θ_pos)_j` over
/// the shown documents, with the softmax taken over the list's positions and
/// `w` from [`relevance_weights`] (treated as constants). Returns the loss
/// and its gradient with respect to every logit.
pub fn dla_propensity_loss<T: Scalar>(
    logits: &[T],
    scores: &[T],
    targets: &[T],
    positions: &[Option<usize>],
) -> Result<(T, Vec<T>)> {
    if scores.len() != targets.len() || scores.len() != positions.len() {
        return Err(Error::LengthMismatch {
            what: "scores, targets and positions",
            left: scores.len(),
            right: targets.len().min(positions.len()),
        });
    }
    let w = relevance_weights(scores, positions);
    let mut grad = vec![T::zero(); logits.len()];
    let shown: Vec<usize> = (0..scores.len()).filter(|&i| positions[i].is_some()).collect();
    if shown.is_empty() {
        return Ok((T::zero(), grad));
    }
    let mut theta = Vec::with_capacity(shown.len());
    for &i in &shown {
        let p = positions[i].unwrap();
        if !(1..=logits.len()).contains(&p) {
            return Err(Error::invalid(format!("position {p} has no logit")));
        }
        theta.push(logits[p - 1]);
    }
    let a: Vec<T> = shown.iter().map(|&i| w[i] * targets[i]).collect();
    let lse = log_sum_exp(&theta);
    let loss: T = a.iter().zip(&theta).map(|(&ai, &t)| -ai * (t - lse)).sum();
    let total: T = a.iter().copied().sum();
    for ((&i, pk), &ak) in shown.iter().zip(softmax(&theta)).zip(&a) {
        grad[positions[i].unwrap() - 1] += pk * total - ak;
    }
    Ok((loss, grad))
}
