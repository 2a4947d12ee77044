//! AdamW with decoupled weight decay, and a step-decay schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| alloc::vec![0.0; t.numel()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One AdamW update. Every gradient is checked before any parameter moves.
pub fn adamw_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamWState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adamw: {} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("adamw: gradient {:?} for parameter {name} {:?}", g.shape(), p.shape())));
        }
        if let Some(bad) = g.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("adamw: non-finite gradient {bad} for parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t);
    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr * cfg.weight_decay * *x;
            *x -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

/// `lr0 · factor^(number of milestones ≤ epoch)`.
pub fn lr_schedule(epoch: usize, lr0: f64, factor: f64, milestones: &[usize]) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    lr0 * libm::pow(factor, passed as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("p", Tensor::new(&[1], alloc::vec![v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar_params(0.7);
        let mut s = AdamWState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        adamw_step(&mut p, &[Tensor::zeros(&[1])], &mut s, 1e-2, &cfg).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[0.7]);
    }

    #[test]
    fn zero_gradient_applies_only_decay() {
        let mut p = scalar_params(2.0);
        let mut s = AdamWState::new(&p);
        adamw_step(&mut p, &[Tensor::zeros(&[1])], &mut s, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[2.0 * (1.0 - 0.1 * 0.01)]);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2, so the step is lr·g/(|g| + eps) after decay.
        let mut p = scalar_params(1.0);
        let mut s = AdamWState::new(&p);
        let lr = 4e-3;
        adamw_step(&mut p, &[Tensor::new(&[1], alloc::vec![1.0]).unwrap()], &mut s, lr, &AdamWConfig::default()).unwrap();
        let want = 1.0 * (1.0 - lr * 0.01) - lr * 1.0 / (1.0 + 1e-8);
        assert!((p.get("p").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_before_update() {
        let mut p = scalar_params(1.0);
        let mut s = AdamWState::new(&p);
        let g = Tensor::new(&[1], alloc::vec![f64::NAN]).unwrap();
        assert!(matches!(adamw_step(&mut p, &[g], &mut s, 0.1, &AdamWConfig::default()), Err(Error::Numeric(_))));
        assert_eq!(p.get("p").unwrap().data(), &[1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_steps_at_milestones() {
        assert_eq!(lr_schedule(0, 4e-3, 0.1, &[10]), 4e-3);
        assert_eq!(lr_schedule(9, 4e-3, 0.1, &[10]), 4e-3);
        assert!((lr_schedule(10, 4e-3, 0.1, &[10]) - 4e-4).abs() < 1e-18);
    }
}
