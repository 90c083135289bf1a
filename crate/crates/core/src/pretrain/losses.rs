//! Pretraining objectives over score vectors. Every loss returns its value
//! and the gradient with respect to the scores.

use serde::{Deserialize, Serialize};

use super::labels::RefinedList;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softmax};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `−Σ w·ỹ·p` with `p` the softmax of the scores, exactly as the listwise
    /// objective is usually written without a logarithm.
    AsWritten,
    /// `−Σ w·ỹ·ln p`, the cross-entropy form.
    Log,
}

/// Weighted listwise loss over one list.
pub fn listwise_loss<T: Scalar>(scores: &[T], targets: &[T], weights: &[T], form: LossForm) -> Result<(T, Vec<T>)> {
    if scores.len() != targets.len() || scores.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "scores, targets and weights",
            left: scores.len(),
            right: targets.len().min(weights.len()),
        });
    }
    if scores.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let p = softmax(scores);
    let a: Vec<T> = targets.iter().zip(weights).map(|(&y, &w)| y * w).collect();
    match form {
        LossForm::AsWritten => {
            let expected: T = a.iter().zip(&p).map(|(&ai, &pi)| ai * pi).sum();
            let grad = p.iter().zip(&a).map(|(&pk, &ak)| -pk * (ak - expected)).collect();
            Ok((-expected, grad))
        }
        LossForm::Log => {
            let lse = crate::scalar::log_sum_exp(scores);
            let loss: T = a.iter().zip(scores).map(|(&ai, &x)| -ai * (x - lse)).sum();
            let total: T = a.iter().copied().sum();
            let grad = p.iter().zip(&a).map(|(&pk, &ak)| pk * total - ak).collect();
            Ok((loss, grad))
        }
    }
}

/// Which relation decided a priority pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRule {
    Click,
    Feature,
    ShownOverNegative,
}

/// Minimum feature gap for the feature rule.
pub const FEATURE_MARGIN: f64 = 1e-9;

/// Priority pairs `(winner, loser)` as entry indices. A clicked document
/// beats an unclicked one; otherwise a shown document beats a random
/// negative; otherwise, between two shown documents, the higher feature wins.
pub fn build_priority_pairs<T: Scalar>(list: &RefinedList<T>) -> Vec<(usize, usize)> {
    build_priority_pairs_with_rules(list)
        .into_iter()
        .map(|(w, l, _)| (w, l))
        .collect()
}

pub fn build_priority_pairs_with_rules<T: Scalar>(list: &RefinedList<T>) -> Vec<(usize, usize, PairRule)> {
    let e = &list.entries;
    let margin = T::of(FEATURE_MARGIN);
    let mut pairs = Vec::new();
    for a in 0..e.len() {
        for b in a + 1..e.len() {
            let (x, y) = (&e[a], &e[b]);
            let decided = if x.click != y.click {
                Some((x.click, PairRule::Click))
            } else if x.is_random_negative != y.is_random_negative {
                Some((!x.is_random_negative, PairRule::ShownOverNegative))
            } else if !x.is_random_negative && (x.feature - y.feature).abs() > margin {
                Some((x.feature > y.feature, PairRule::Feature))
            } else {
                None
            };
            if let Some((a_wins, rule)) = decided {
                pairs.push(if a_wins { (a, b, rule) } else { (b, a, rule) });
            }
        }
    }
    pairs
}

/// Weighted mean over pairs of `−σ(x_w − x_l)` (as written) or
/// `−ln σ(x_w − x_l)` (log form). Empty pair sets give zero loss.
pub fn pairwise_pretrain_loss<T: Scalar>(
    scores: &[T],
    pairs: &[(usize, usize)],
    pair_weights: Option<&[T]>,
    form: LossForm,
) -> Result<(T, Vec<T>)> {
    let mut grad = vec![T::zero(); scores.len()];
    if pairs.is_empty() {
        log::warn!("pairwise loss over an empty pair set");
        return Ok((T::zero(), grad));
    }
    if let Some(w) = pair_weights {
        if w.len() != pairs.len() {
            return Err(Error::LengthMismatch {
                what: "pairs vs pair weights",
                left: pairs.len(),
                right: w.len(),
            });
        }
    }
    let n = T::of_usize(pairs.len());
    let mut loss = T::zero();
    for (k, &(w, l)) in pairs.iter().enumerate() {
        if w >= scores.len() || l >= scores.len() {
            return Err(Error::invalid("pair index out of range"));
        }
        let weight = pair_weights.map_or(T::one(), |ws| ws[k]) / n;
        let (value, dd) = pair_term(scores[w] - scores[l], form);
        loss += weight * value;
        grad[w] += weight * dd;
        grad[l] -= weight * dd;
    }
    Ok((loss, grad))
}

/// Value and derivative in the margin `d = x⁺ − x⁻` of one pair term.
pub(crate) fn pair_term<T: Scalar>(d: T, form: LossForm) -> (T, T) {
    let s = sigmoid(d);
    match form {
        LossForm::AsWritten => (-s, -s * (T::one() - s)),
        // −ln σ(d) = softplus(−d), evaluated stably.
        LossForm::Log => {
            let softplus = if d > T::zero() {
                (-d).exp().ln_1p()
            } else {
                -d + d.exp().ln_1p()
            };
            (softplus, -sigmoid(-d))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check_slice;
    use crate::pretrain::labels::RefinedEntry;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn entry(doc: &str, click: bool, feature: f64, neg: bool) -> RefinedEntry<f64> {
        RefinedEntry {
            doc_id: doc.into(),
            position: if neg { None } else { Some(1) },
            click,
            feature,
            raw_label: 0.0,
            target: 0.0,
            is_random_negative: neg,
        }
    }

    fn list(entries: Vec<RefinedEntry<f64>>) -> RefinedList<f64> {
        RefinedList {
            query_id: "q".into(),
            entries,
        }
    }

    #[test]
    fn uniform_scores_one_hot_target() {
        for k in [1usize, 2, 5, 10] {
            let scores = vec![0.3_f64; k];
            let mut y = vec![0.0; k];
            y[k / 2] = 1.0;
            let w = vec![1.0; k];
            let (a, _) = listwise_loss(&scores, &y, &w, LossForm::AsWritten).unwrap();
            assert_relative_eq!(a, -1.0 / k as f64, epsilon = 1e-15);
            let (l, _) = listwise_loss(&scores, &y, &w, LossForm::Log).unwrap();
            assert_relative_eq!(l, (k as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(listwise_loss(&[0.0_f64; 3], &[0.5; 2], &[1.0; 3], LossForm::Log).is_err());
    }

    /// Gradient descent on the scores of a 3-element list converges to
    /// softmax(x) = ỹ under the log form.
    #[test]
    fn log_form_minimizer_is_the_target_distribution() {
        let y = [0.6_f64, 0.3, 0.1];
        let w = [1.0; 3];
        let mut x = [0.0_f64, 2.0, -1.0];
        for _ in 0..5000 {
            let (_, g) = listwise_loss(&x, &y, &w, LossForm::Log).unwrap();
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= 0.5 * gi;
            }
        }
        let p = softmax(&x);
        for (pi, yi) in p.iter().zip(&y) {
            assert!((pi - yi).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn listwise_gradients_match_finite_differences() {
        let y = [0.5_f64, 0.2, 0.25, 0.05];
        let w = [1.0, 1.19, 1.44, 1.0];
        let x = [0.3_f64, -1.2, 0.8, 0.05];
        for form in [LossForm::AsWritten, LossForm::Log] {
            let (_, g) = listwise_loss(&x, &y, &w, form).unwrap();
            let err = grad_check_slice(&x, &g, |s| Ok(listwise_loss(s, &y, &w, form)?.0), 1e-5).unwrap();
            assert!(err < 1e-6, "{form:?}: {err}");
        }
    }

    #[test]
    fn click_beats_no_click_regardless_of_feature() {
        let l = list(vec![entry("a", false, 9.0, false), entry("b", true, 0.0, false)]);
        assert_eq!(build_priority_pairs(&l), vec![(1, 0)]);
    }

    #[test]
    fn feature_rule_between_unclicked_shown_docs() {
        let l = list(vec![entry("a", false, 0.9, false), entry("b", false, 0.1, false)]);
        assert_eq!(build_priority_pairs_with_rules(&l), vec![(0, 1, PairRule::Feature)]);
        let tie = list(vec![entry("a", false, 0.5, false), entry("b", false, 0.5 + 1e-12, false)]);
        assert!(build_priority_pairs(&tie).is_empty());
    }

    #[test]
    fn negatives_lose_to_shown_and_tie_with_each_other() {
        let l = list(vec![
            entry("n1", false, 5.0, true),
            entry("a", false, 0.0, false),
            entry("n2", false, 0.0, true),
        ]);
        let pairs = build_priority_pairs_with_rules(&l);
        assert_eq!(
            pairs,
            vec![(1, 0, PairRule::ShownOverNegative), (1, 2, PairRule::ShownOverNegative)]
        );
    }

    #[test]
    fn pairwise_hand_values() {
        let (a, _) = pairwise_pretrain_loss(&[1.0_f64, 1.0], &[(0, 1)], None, LossForm::AsWritten).unwrap();
        assert_eq!(a, -0.5);
        let (l, _) = pairwise_pretrain_loss(&[1.0_f64, 1.0], &[(0, 1)], None, LossForm::Log).unwrap();
        assert_relative_eq!(l, 2f64.ln(), epsilon = 1e-15);
        let (a, _) = pairwise_pretrain_loss(&[800.0_f64, -800.0], &[(0, 1)], None, LossForm::AsWritten).unwrap();
        assert_eq!(a, -1.0);
        let (l, _) = pairwise_pretrain_loss(&[800.0_f64, -800.0], &[(0, 1)], None, LossForm::Log).unwrap();
        assert_eq!(l, 0.0);
        let (e, g) = pairwise_pretrain_loss::<f64>(&[1.0, 2.0], &[], None, LossForm::Log).unwrap();
        assert_eq!((e, g), (0.0, vec![0.0, 0.0]));
    }

    #[test]
    fn pairwise_gradients_match_finite_differences() {
        let x = [0.3_f64, -1.2, 0.8, 0.05];
        let pairs = [(0, 1), (2, 1), (0, 3), (2, 3)];
        let w = [1.0, 1.44, 2.0, 1.0];
        for form in [LossForm::AsWritten, LossForm::Log] {
            let (_, g) = pairwise_pretrain_loss(&x, &pairs, Some(&w), form).unwrap();
            let err = grad_check_slice(&x, &g, |s| Ok(pairwise_pretrain_loss(s, &pairs, Some(&w), form)?.0), 1e-5).unwrap();
            assert!(err < 1e-6, "{form:?}: {err}");
        }
    }

    proptest! {
        #[test]
        fn priority_pairs_are_antisymmetric(
            rows in proptest::collection::vec((any::<bool>(), 0u8..4, any::<bool>()), 0..12),
        ) {
            let l = list(rows.iter().enumerate().map(|(i, &(c, f, neg))| {
                entry(&format!("d{i}"), c && !neg, f as f64, neg)
            }).collect());
            let pairs = build_priority_pairs(&l);
            let set: std::collections::HashSet<_> = pairs.iter().copied().collect();
            for &(a, b) in &pairs {
                prop_assert!(a != b);
                prop_assert!(!set.contains(&(b, a)));
            }
            prop_assert_eq!(set.len(), pairs.len());
        }

        #[test]
        fn pairwise_is_shift_invariant(x in proptest::collection::vec(-5.0f64..5.0, 2..6), c in -50.0f64..50.0) {
            let pairs: Vec<(usize, usize)> = (1..x.len()).map(|i| (0, i)).collect();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            for form in [LossForm::AsWritten, LossForm::Log] {
                let a = pairwise_pretrain_loss(&x, &pairs, None, form).unwrap().0;
                let b = pairwise_pretrain_loss(&shifted, &pairs, None, form).unwrap().0;
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
