use rand::seq::index::sample;
use rand::Rng as _;

use super::{loss_only, forward_backward, Example, WideDeepScorer};
use crate::error::{Error, Result};
use crate::{seed, Scalar};

/// Gradients below this magnitude (per unit of loss) are compared
/// absolutely. Central differences at step 1e-5 carry roughly 1e-11·|loss|
/// of rounding noise, so exactly-zero gradients (e.g. attention key biases)
/// would otherwise dominate the maximum.
const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, RELATIVE_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Parameter block and offset of the worst coordinate.
    pub worst: (String, usize),
}

/// Compares the reverse-mode gradient with central differences on a random
/// subsample of at least `min_coords` coordinates, spread over every
/// parameter block. Embedding rows are drawn only from ids in the batch.
pub fn grad_check<T, F>(
    params: &WideDeepScorer<T>,
    batch: &[Example<T>],
    loss_fn: F,
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<(T, Vec<T>)>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (loss, grads) = forward_backward(params, batch, &loss_fn)?;
    let floor = RELATIVE_FLOOR * loss.as_f64().abs().max(1.0);
    let mut probe = params.clone();
    let mut rng = seed::rng(seed, "grad-check", 0);

    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grad_blocks = grads.tensors();
    let sizes: Vec<usize> = grad_blocks.iter().map(|(_, t)| t.len()).collect();
    let mut alloc: Vec<usize> = sizes
        .iter()
        .map(|&n| n.min(min_coords.div_ceil(names.len()).max(1)))
        .collect();
    // Small blocks cannot take their share; the largest blocks make it up.
    let mut by_size: Vec<usize> = (0..sizes.len()).collect();
    by_size.sort_by_key(|&b| std::cmp::Reverse(sizes[b]));
    for &b in &by_size {
        let deficit = min_coords.saturating_sub(alloc.iter().sum());
        alloc[b] = sizes[b].min(alloc[b] + deficit);
    }
    let mut used_ids: Vec<usize> = batch
        .iter()
        .flat_map(|e| e.ids.iter().map(|&i| i as usize))
        .collect();
    used_ids.sort_unstable();
    used_ids.dedup();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coordinates: 0,
        worst: (String::new(), 0),
    };
    for (b, name) in names.iter().enumerate() {
        let len = sizes[b];
        let cols = grad_blocks[b].1.cols;
        let offsets: Vec<usize> = if name == "token_embedding" {
            (0..alloc[b])
                .map(|_| used_ids[rng.gen_range(0..used_ids.len())] * cols + rng.gen_range(0..cols))
                .collect()
        } else {
            sample(&mut rng, len, alloc[b]).into_vec()
        };
        for off in offsets {
            let original = probe.tensors_mut()[b].data[off];
            probe.tensors_mut()[b].data[off] = original + T::of(eps);
            let plus = loss_only(&probe, batch, &loss_fn)?.as_f64();
            probe.tensors_mut()[b].data[off] = original - T::of(eps);
            let minus = loss_only(&probe, batch, &loss_fn)?.as_f64();
            probe.tensors_mut()[b].data[off] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grad_blocks[b].1.data[off].as_f64();
            let err = relative_error_floored(analytic, numeric, floor);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.0.is_empty() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = (name.clone(), off);
            }
        }
    }
    Ok(report)
}

/// Central-difference check of `analytic` against `f` at `point`, every
/// coordinate. Returns the maximum relative error.
pub fn grad_check_slice<T, F>(point: &[T], analytic: &[T], f: F, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<T>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if point.len() != analytic.len() {
        return Err(Error::LengthMismatch {
            what: "point vs gradient",
            left: point.len(),
            right: analytic.len(),
        });
    }
    let mut x = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + T::of(eps);
        let plus = f(&x)?.as_f64();
        x[i] = orig - T::of(eps);
        let minus = f(&x)?.as_f64();
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i].as_f64(), (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}
