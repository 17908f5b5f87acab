//! AdamW: Adam with decoupled weight decay.
//!
//! Moments are kept in f64 so the update recurrence is exact to well below
//! f32 resolution; parameters remain f32 storage. The weight-decay term is
//! decoupled: theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta),
//! with the decay computed from the pre-step value.

use crate::error::{CkbError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.01,
        }
    }
}

/// One scalar AdamW update with bias correction. `t_next` is the step
/// counter after this update (1 on the first step). Returns the new
/// (theta, m, v).
pub fn adamw_scalar(
    theta: f64,
    g: f64,
    m: f64,
    v: f64,
    t_next: u64,
    cfg: &AdamWConfig,
) -> (f64, f64, f64) {
    let m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    let v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    let m_hat = m / (1.0 - cfg.beta1.powi(t_next as i32));
    let v_hat = v / (1.0 - cfg.beta2.powi(t_next as i32));
    let theta = theta - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta);
    (theta, m, v)
}

/// Per-parameter-group optimizer state. The group order must be identical
/// on every step; shapes are checked against the stored moments.
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> AdamW {
        AdamW {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update to every tensor in the group using its `grad`.
    /// Tensors without a gradient (unused this step) are left unchanged
    /// apart from nothing: no decay is applied without a gradient either,
    /// so an untouched parameter stays bit-identical.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(CkbError::State(format!(
                "optimizer holds {} parameter states, group has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        for (idx, p) in params.iter_mut().enumerate() {
            if self.m[idx].len() != p.numel() {
                return Err(CkbError::State(format!(
                    "parameter {} changed size: state {}, tensor {}",
                    idx,
                    self.m[idx].len(),
                    p.numel()
                )));
            }
            let grad = match &p.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                let (theta, m, v) = adamw_scalar(
                    data[i] as f64,
                    grad[i] as f64,
                    self.m[idx][i],
                    self.v[idx][i],
                    self.t,
                    &self.cfg,
                );
                data[i] = theta as f32;
                self.m[idx][i] = m;
                self.v[idx][i] = v;
            }
        }
        Ok(())
    }

    /// Explicit gradient reset, called once per optimization step.
    pub fn zero_grads(params: &mut [&mut Tensor]) {
        for p in params.iter_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
        p.requires_grad = true;
        p.grad = Some(vec![0.0, 0.0, 0.0]);
        let before = p.data().to_vec();
        let mut opt = AdamW::new(cfg(2e-4, 0.0));
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn single_step_matches_hand_recurrence() {
        // theta=1, g=0.5, lr=2e-4, wd=0.01, t: 0 -> 1.
        let c = cfg(2e-4, 0.01);
        let (theta, m, v) = adamw_scalar(1.0, 0.5, 0.0, 0.0, 1, &c);
        // m=0.05, m_hat=0.5; v=0.005, v_hat=0.25; step = lr*(0.5/(0.5+eps) + 0.01*1)
        let expected = 1.0 - 2e-4 * (0.5 / (0.25f64.sqrt() + 1e-9) + 0.01);
        assert!((theta - expected).abs() < 1e-15);
        assert!((theta - 0.999798).abs() < 1e-9, "theta = {theta}");
        assert!((m - 0.05).abs() < 1e-15);
        assert!((v - 0.005).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let c = cfg(2e-4, 0.01);
        // Independent reference: write the recurrence out longhand.
        let (b1, b2) = (0.9f64, 0.98f64);
        let g = 0.5f64;
        let mut theta_ref = 1.0f64;
        let mut m_ref = 0.0f64;
        let mut v_ref = 0.0f64;
        for t in 1..=2u32 {
            m_ref = b1 * m_ref + (1.0 - b1) * g;
            v_ref = b2 * v_ref + (1.0 - b2) * g * g;
            let mh = m_ref / (1.0 - b1.powi(t as i32));
            let vh = v_ref / (1.0 - b2.powi(t as i32));
            theta_ref -= 2e-4 * (mh / (vh.sqrt() + 1e-9) + 0.01 * theta_ref);
        }
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2u64 {
            let out = adamw_scalar(theta, g, m, v, t, &c);
            theta = out.0;
            m = out.1;
            v = out.2;
        }
        assert!((theta - theta_ref).abs() < 1e-9);
    }

    #[test]
    fn tensor_step_matches_scalar_kernel() {
        let c = cfg(1e-3, 0.01);
        let mut p = Tensor::vector(vec![1.0, -0.5]);
        p.requires_grad = true;
        let mut opt = AdamW::new(c);
        let grads = [[0.5f64, -0.25], [0.1, 0.3]];
        let mut reference = [(1.0f64, 0.0f64, 0.0f64), (-0.5, 0.0, 0.0)];
        for (step, g) in grads.iter().enumerate() {
            p.grad = Some(vec![g[0] as f32, g[1] as f32]);
            opt.step(&mut [&mut p]).unwrap();
            for (i, r) in reference.iter_mut().enumerate() {
                // Reference chains through the same f32 parameter rounding.
                let out = adamw_scalar(r.0, g[i], r.1, r.2, (step + 1) as u64, &c);
                *r = ((out.0 as f32) as f64, out.1, out.2);
                assert!(
                    (p.data()[i] as f64 - r.0).abs() < 1e-12,
                    "component {i} after step {step}"
                );
            }
        }
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn group_size_change_is_a_state_error() {
        let mut a = Tensor::vector(vec![1.0]);
        a.requires_grad = true;
        a.grad = Some(vec![0.1]);
        let mut b = a.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [&mut a]).unwrap();
        assert!(opt.step(&mut [&mut a, &mut b]).is_err());
    }

    #[test]
    fn shape_change_is_a_state_error() {
        let mut a = Tensor::vector(vec![1.0, 2.0]);
        a.requires_grad = true;
        a.grad = Some(vec![0.1, 0.1]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [&mut a]).unwrap();
        let mut b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        b.requires_grad = true;
        b.grad = Some(vec![0.1, 0.1, 0.1]);
        assert!(opt.step(&mut [&mut b]).is_err());
    }
}
