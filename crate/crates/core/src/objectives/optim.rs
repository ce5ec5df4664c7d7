use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Peak learning rate reached at the end of warmup.
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_min: 1e-6,
            warmup_iters: 500,
            total_iters: 24_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr with lr > 0, got {} / {}", self.lr_min, self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("AdamW betas must lie in [0, 1) and eps > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.total_iters == 0 || self.warmup_iters > self.total_iters {
            return Err(Error::Config("need 0 <= warmup_iters <= total_iters and total_iters > 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to `lr_min` at
/// `total_iters` (held afterwards).
pub fn lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    if step < cfg.warmup_iters {
        return cfg.lr * step as f64 / cfg.warmup_iters as f64;
    }
    let span = cfg.total_iters.saturating_sub(cfg.warmup_iters);
    let progress = if span == 0 { 1.0 } else { ((step - cfg.warmup_iters) as f64 / span as f64).min(1.0) };
    cfg.lr_min + (cfg.lr - cfg.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimConfig,
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Per-parameter multipliers on the scheduled learning rate.
    lr_scale: Vec<f64>,
    /// Per-parameter switch for weight decay.
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            lr_scale: vec![1.0; params.len()],
            decay: vec![true; params.len()],
        }
    }

    pub fn set_lr_scale(&mut self, index: usize, scale: f64) {
        self.lr_scale[index] = scale;
    }

    pub fn set_decay(&mut self, index: usize, decay: bool) {
        self.decay[index] = decay;
    }

    /// Apply one update; returns the learning rate used.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("adamw", format!("{} params, {} grads, {} states", params.len(), grads.len(), self.m.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape("adamw", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = lr_at(self.step, c);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr_i = lr * self.lr_scale[i];
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *x = *x * (1.0 - lr_i * wd) - lr_i * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let cfg = OptimConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(500, &cfg) - 2e-4).abs() < 1e-18);
        assert!((lr_at(24_000, &cfg) - 1e-6).abs() < 1e-18);
        // continuity across the warmup boundary
        assert!((lr_at(499, &cfg) - lr_at(500, &cfg)).abs() < 1e-6);
        assert!((lr_at(501, &cfg) - lr_at(500, &cfg)).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for s in (500..=24_000).step_by(100) {
            let lr = lr_at(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let cfg = OptimConfig { weight_decay: 0.0, warmup_iters: 0, ..Default::default() };
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let before = p.clone();
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = OptimConfig { weight_decay: 0.0, warmup_iters: 0, total_iters: 10, lr: 1e-2, ..Default::default() };
        let g = Tensor::vector(vec![0.5, -3.0, 1e-3]);
        let mut p = vec![Tensor::zeros(&[3])];
        let mut opt = AdamW::new(cfg.clone(), &p);
        let lr = opt.step(&mut p, std::slice::from_ref(&g)).unwrap();
        // m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps)
        for (x, gk) in p[0].data().iter().zip(g.data()) {
            let want = -lr * gk / (gk.abs() + cfg.eps);
            assert!((x - want).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut p = vec![Tensor::vector(vec![0.3, 0.7])];
            let mut opt = AdamW::new(OptimConfig { warmup_iters: 2, total_iters: 20, ..Default::default() }, &p);
            for i in 0..10 {
                let g = Tensor::vector(vec![(i as f64).sin(), (i as f64).cos()]);
                opt.step(&mut p, &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_is_numeric_error() {
        let mut p = vec![Tensor::zeros(&[1])];
        let mut opt = AdamW::new(OptimConfig::default(), &p);
        assert!(matches!(opt.step(&mut p, &[Tensor::vector(vec![f64::NAN])]), Err(Error::Numeric(_))));
    }
}
