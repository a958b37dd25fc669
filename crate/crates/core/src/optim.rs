//! AdamW with global-norm clipping and a linear learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Gradients are rescaled when their global L2 norm exceeds this.
    pub clip_norm: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Moment estimates for a fixed, ordered list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Clips `grads` in place, then updates `params`. Returns the pre-clip norm.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &mut [Vec<f32>], lr: f32) -> Result<f32> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let norm = clip_global_norm(grads, self.config.clip_norm);
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != p.numel() {
                return Err(Error::Dimension {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut w = p.to_vec();
            for j in 0..w.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[j]);
            }
            **p = Tensor::new(p.shape(), w)?;
        }
        Ok(norm)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// Learning rate at `step` (0-based): optional linear warmup, then linear decay to 0 at `total`.
pub fn scheduled_lr(base: f32, step: usize, total: usize, warmup: usize, decay: bool) -> f32 {
    if step < warmup {
        return base * (step + 1) as f32 / warmup as f32;
    }
    if !decay || total <= warmup {
        return base;
    }
    let frac = (step - warmup) as f32 / (total - warmup) as f32;
    base * (1.0 - frac).max(0.0)
}
