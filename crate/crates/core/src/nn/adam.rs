use serde::{Deserialize, Serialize};

use super::{NnError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(NnError::Shape(format!(
            "adam: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = [0.3, -4.0, 1e-2];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        for ((after, before), grad) in p.iter().zip([1.0, -2.0, 0.5]).zip(g) {
            let step = after - before;
            assert!(
                (step + cfg.lr * f64::signum(grad)).abs() < 1e-6 * cfg.lr * 10.0,
                "{step}"
            );
        }
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = vec![0.25f64; 4];
        let mut st = AdamState::new(4);
        adam_step(&mut p, &[0.0; 4], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.25; 4]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut x = vec![1.0f64];
        let mut st = AdamState::new(1);
        let mut hit = None;
        for step in 0..500 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut st, &cfg).unwrap();
            if x[0].abs() < 1e-3 && hit.is_none() {
                hit = Some(step);
            }
        }
        assert!(x[0].abs() < 1e-3, "x = {}", x[0]);
        assert!(hit.is_some());
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = vec![0.0f64; 2];
        let mut st = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut st, &AdamConfig::default()).is_err());
    }
}
