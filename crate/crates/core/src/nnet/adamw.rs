//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update. Non-finite gradients reject the step and leave both
/// parameters and state untouched.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        bail!(
            Shape,
            "adamw: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        );
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        bail!(Numerics, "gradient {i} is not finite; step rejected");
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *p *= decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_no_decay_is_noop() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamWState::new(3);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &[0.0; 3], &mut s, 1e-3, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamWState::new(2);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let g = [0.5, -2.0];
        adamw_step(&mut p, &g, &mut s, 0.01, &cfg).unwrap();
        // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        for (pv, gv) in p.iter().zip(g) {
            let want = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((pv - want).abs() < 1e-15, "{pv} vs {want}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut p = vec![2.0, -4.0];
        let mut s = AdamWState::new(2);
        let cfg = AdamWConfig::default();
        adamw_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &cfg).unwrap();
        assert_eq!(p, vec![2.0 * (1.0 - 0.1 * 0.05), -4.0 * (1.0 - 0.1 * 0.05)]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut p = vec![1.0, 1.0];
        let mut s = AdamWState::new(2);
        let r = adamw_step(&mut p, &[f64::NAN, 0.0], &mut s, 0.1, &AdamWConfig::default());
        assert!(matches!(r, Err(crate::Error::Numerics(_))));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(s, AdamWState::new(2));
    }

    #[test]
    fn quadratic_descent() {
        // loss = 0.5 * sum(a_i x_i^2)
        let a = [1.0, 3.0, 0.5, 2.0];
        let mut x = vec![1.0, -1.5, 2.0, 0.7];
        let mut s = AdamWState::new(4);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let loss = |x: &[f64]| 0.5 * x.iter().zip(&a).map(|(v, k)| k * v * v).sum::<f64>();
        let mut prev = loss(&x);
        for step in 0..200 {
            let g: Vec<f64> = x.iter().zip(&a).map(|(v, k)| k * v).collect();
            adamw_step(&mut x, &g, &mut s, 0.01, &cfg).unwrap();
            let l = loss(&x);
            if step >= 10 {
                assert!(l <= prev, "loss rose at step {step}: {prev} -> {l}");
            }
            prev = l;
        }
        assert!(prev < 0.05 * loss(&[1.0, -1.5, 2.0, 0.7]));
    }
}
