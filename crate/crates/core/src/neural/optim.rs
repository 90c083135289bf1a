use serde::{Deserialize, Serialize};

use super::WideDeepScorer;
use crate::error::{Error, Result};
use crate::Scalar;

/// Anything exposing its trainable values as a fixed sequence of slices.
pub trait Parameters<T> {
    fn param_slices(&self) -> Vec<&[T]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [T]>;
}

impl<T: Scalar> Parameters<T> for WideDeepScorer<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        self.tensors().into_iter().map(|(_, t)| t.data.as_slice()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.tensors_mut()
            .into_iter()
            .map(|t| t.data.as_mut_slice())
            .collect()
    }
}

impl<T> Parameters<T> for Vec<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        vec![self.as_slice()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.as_mut_slice()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<P: Parameters<T>>(params: &P, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = params
            .param_slices()
            .iter()
            .map(|s| vec![T::zero(); s.len()])
            .collect();
        OptimizerState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
pub fn adamw_step<T: Scalar, P: Parameters<T>>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let grads = grads.param_slices();
    let mut params = params.param_slices_mut();
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::invalid("optimizer state does not match parameters"));
    }
    state.step += 1;
    let c = state.config;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bias1 = T::one() - T::of(c.beta1.powf(state.step as f64));
    let bias2 = T::one() - T::of(c.beta2.powf(state.step as f64));
    let (lr, wd, eps) = (T::of(c.lr), T::of(c.weight_decay), T::of(c.epsilon));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::invalid("parameter and gradient shapes differ"));
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bias1;
            let vhat = v[i] / bias2;
            p[i] = p[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![1.0_f64, -2.0, 0.5];
        let g = vec![0.0; 3];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(&p, cfg);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn decay_shrinks_by_lr_times_wd() {
        let mut p = vec![1.0_f64, -2.0];
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut p, &vec![0.0; 2], &mut st).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
        assert!((p[1] + 1.9).abs() < 1e-15);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1, v = 0.001; bias-corrected both are 1, so the step is
        // lr/(1 + eps) plus decay lr·wd·p.
        let mut p = vec![1.0_f64];
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        adamw_step(&mut p, &vec![1.0], &mut st).unwrap();
        let expect = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert!((p[0] - expect).abs() < 1e-12, "{}", p[0]);
        assert!(p[0] < 1.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![1.0_f64, 2.0];
        let mut st = OptimizerState::new(&vec![0.0_f64], AdamWConfig::default());
        assert!(adamw_step(&mut p, &vec![0.0, 0.0], &mut st).is_err());
    }
}
