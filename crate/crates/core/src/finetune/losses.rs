//! Group softmax losses over one positive and its negatives.

use crate::error::{Error, Result};
use crate::pretrain::LossForm;
use crate::Scalar;

/// One-positive group loss. As written: `−exp(x⁺) / Σ_j exp(x_j)`; log form:
/// `−ln` of that ratio. Evaluated after shifting by the group maximum.
/// Returns the loss and its gradient w.r.t. every score.
pub fn softmax_negatives_loss<T: Scalar>(scores: &[T], positive: &[bool], form: LossForm) -> Result<(T, Vec<T>)> {
    if scores.len() != positive.len() {
        return Err(Error::LengthMismatch {
            what: "group scores vs labels",
            left: scores.len(),
            right: positive.len(),
        });
    }
    let mut pos = positive.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i);
    let (Some(k), None) = (pos.next(), pos.next()) else {
        return Err(Error::invalid("a group needs exactly one positive"));
    };
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = scores.iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    let p: Vec<T> = e.iter().map(|&v| v / z).collect();
    Ok(match form {
        LossForm::AsWritten => {
            let pk = p[k];
            let grad = p
                .iter()
                .enumerate()
                .map(|(j, &pj)| if j == k { -pk * (T::one() - pk) } else { pk * pj })
                .collect();
            (-pk, grad)
        }
        LossForm::Log => {
            let loss = z.ln() - (scores[k] - m);
            let grad = p
                .iter()
                .enumerate()
                .map(|(j, &pj)| if j == k { pj - T::one() } else { pj })
                .collect();
            (loss, grad)
        }
    })
}

/// Two-document case `−exp(x⁺) / (exp(x⁺) + exp(x⁻))` (or its `−ln`).
/// Returns `(loss, ∂/∂x⁺, ∂/∂x⁻)`; identical to the group loss on `[x⁻, x⁺]`.
pub fn pairwise_loss<T: Scalar>(x_pos: T, x_neg: T, form: LossForm) -> (T, T, T) {
    let (l, g) = softmax_negatives_loss(&[x_neg, x_pos], &[false, true], form).expect("one positive");
    (l, g[1], g[0])
}
