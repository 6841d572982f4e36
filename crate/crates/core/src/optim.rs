//! Decoupled-weight-decay Adam with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-4, lr_min: 5e-6, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning rate at `step` of `total`: linear warmup over `warmup` steps,
/// then cosine decay from `lr` to `lr_min`.
pub fn schedule(cfg: &AdamWConfig, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. `decay[i]` selects whether tensor `i` is decayed;
    /// tensors with no gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>], decay: &[bool], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let upd = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] -= lr * (upd + wd * p[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = AdamWConfig::default();
        assert!((schedule(&c, 0, 10, 100) - 5e-5).abs() < 1e-18);
        assert!((schedule(&c, 9, 10, 100) - 5e-4).abs() < 1e-18);
        assert!((schedule(&c, 10, 10, 100) - 5e-4).abs() < 1e-18);
        assert!((schedule(&c, 100, 10, 100) - 5e-6).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = schedule(&c, s, 10, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &[2]);
        let mut x = vec![3.0, -2.0];
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [&mut x], &[Some(&g)], &[false], 0.05);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn skips_missing_gradients() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        let mut x = vec![1.0];
        opt.step(&mut [&mut x], &[None], &[true], 0.1);
        assert_eq!(x, vec![1.0]);
    }
}
