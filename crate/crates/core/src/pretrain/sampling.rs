//! Random-negative injection and post-click replacement.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng as _;

use super::labels::{RefinedEntry, RefinedList};
use crate::{seed, Scalar};

fn negative<T: Scalar>(doc_id: &str, position: Option<usize>) -> RefinedEntry<T> {
    RefinedEntry {
        doc_id: doc_id.to_owned(),
        position,
        click: false,
        feature: T::zero(),
        raw_label: T::zero(),
        target: T::zero(),
        is_random_negative: true,
    }
}

/// Draws `k` documents from `pool` not already in `exclude`, without
/// replacement; with replacement (and a warning) when too few exist.
fn draw<'a>(pool: &'a [String], exclude: &HashSet<&str>, k: usize, rng: &mut seed::Rng) -> Vec<&'a str> {
    let eligible: Vec<&str> = pool
        .iter()
        .map(String::as_str)
        .filter(|d| !exclude.contains(d))
        .collect();
    if k == 0 || eligible.is_empty() {
        if k > 0 {
            log::warn!("no eligible random negatives in a pool of {}", pool.len());
        }
        return Vec::new();
    }
    if eligible.len() < k {
        log::warn!(
            "negative pool of {} is smaller than {k}; sampling with replacement",
            eligible.len()
        );
        return (0..k)
            .map(|_| eligible[rng.gen_range(0..eligible.len())])
            .collect();
    }
    sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect()
}

/// Appends `k` random negatives from `doc_pool` (documents of other queries
/// in the batch). They carry click 0 and raw label 0; call
/// [`RefinedList::normalize_targets`] afterwards.
pub fn inject_random_negatives<T: Scalar>(list: &mut RefinedList<T>, doc_pool: &[String], k: usize, seed: u64) {
    let mut rng = seed::rng(seed, "inject-negatives", 0);
    let exclude: HashSet<&str> = list.entries.iter().map(|e| e.doc_id.as_str()).collect();
    let picked: Vec<String> = draw(doc_pool, &exclude, k, &mut rng)
        .into_iter()
        .map(str::to_owned)
        .collect();
    list.entries.extend(picked.iter().map(|d| negative(d, None)));
}

/// Replaces every document logged after the last click with a random
/// negative that keeps the position slot. Lists without clicks are unchanged.
pub fn replace_post_click<T: Scalar>(list: &mut RefinedList<T>, doc_pool: &[String], seed: u64) {
    let Some(last) = list
        .entries
        .iter()
        .filter(|e| e.click)
        .filter_map(|e| e.position)
        .max()
    else {
        return;
    };
    let slots: Vec<usize> = list
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.position.is_some_and(|p| p > last))
        .map(|(i, _)| i)
        .collect();
    if slots.is_empty() {
        return;
    }
    let mut rng = seed::rng(seed, "replace-post-click", 0);
    let exclude: HashSet<&str> = list.entries.iter().map(|e| e.doc_id.as_str()).collect();
    let picked: Vec<String> = draw(doc_pool, &exclude, slots.len(), &mut rng)
        .into_iter()
        .map(str::to_owned)
        .collect();
    for (&slot, doc) in slots.iter().zip(&picked) {
        let pos = list.entries[slot].position;
        list.entries[slot] = negative(doc, pos);
    }
}
