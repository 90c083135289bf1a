//! Dense row-major matrices and the handful of kernels the scorer needs.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        Tensor {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| T::of(rng.gen_range(-bound..=bound)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out[r] = x[r] · W + b` for `rows` rows; `W` is `inner × cols`.
pub(crate) fn affine<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>, out: &mut [T]) {
    let (inner, cols) = (w.rows, w.cols);
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        o.copy_from_slice(&b.data);
        let xr = &x[r * inner..(r + 1) * inner];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wr = &w.data[k * cols..(k + 1) * cols];
            for (oj, &wj) in o.iter_mut().zip(wr) {
                *oj += xv * wj;
            }
        }
    }
}

/// Backward of [`affine`]: accumulates `dW += xᵀ·dy`, `db += Σ dy` and,
/// when `dx` is given, overwrites it with `dy · Wᵀ`.
pub(crate) fn affine_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &Tensor<T>,
    dy: &[T],
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
    dx: Option<&mut [T]>,
) {
    let (inner, cols) = (w.rows, w.cols);
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        for (bj, &g) in db.data.iter_mut().zip(dyr) {
            *bj += g;
        }
        let xr = &x[r * inner..(r + 1) * inner];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let dwr = &mut dw.data[k * cols..(k + 1) * cols];
            for (d, &g) in dwr.iter_mut().zip(dyr) {
                *d += xv * g;
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * cols..(r + 1) * cols];
            for k in 0..inner {
                let wr = &w.data[k * cols..(k + 1) * cols];
                dx[r * inner + k] = wr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
            }
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalisation. Stores the normalised rows in `xhat` and
/// the reciprocal standard deviations in `rstd`.
pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    rows: usize,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    xhat: &mut [T],
    rstd: &mut [T],
    out: &mut [T],
) {
    let d = gain.cols;
    let n = T::of_usize(d);
    let eps = T::of(LAYER_NORM_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let s = T::one() / (var + eps).sqrt();
        rstd[r] = s;
        for j in 0..d {
            let h = (xr[j] - mean) * s;
            xhat[r * d + j] = h;
            out[r * d + j] = gain.data[j] * h + bias.data[j];
        }
    }
}

/// Backward of [`layer_norm`]; adds into `dx`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    rows: usize,
    gain: &Tensor<T>,
    xhat: &[T],
    rstd: &[T],
    dgain: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
    dx: &mut [T],
) {
    let d = gain.cols;
    let n = T::of_usize(d);
    let mut dh = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgain.data[j] += dyr[j] * hr[j];
            dbias.data[j] += dyr[j];
            dh[j] = dyr[j] * gain.data[j];
        }
        let mean_dh = dh.iter().copied().sum::<T>() / n;
        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
        for j in 0..d {
            dx[r * d + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
        }
    }
}
