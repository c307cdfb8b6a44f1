//! AdamW with decoupled weight decay, plus global gradient-norm clipping.
//!
//! Update order per parameter (matching the common decoupled form):
//!   p *= 1 - lr * weight_decay
//!   m = b1*m + (1-b1)*g ; v = b2*v + (1-b2)*g^2
//!   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
//!
//! All loops are index-ascending, so identical inputs give bit-identical
//! parameter trajectories.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::num::Num;
use crate::Result;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
}

impl<S: Num> AdamWConfig<S> {
    pub fn with_lr(lr: S) -> Self {
        AdamWConfig {
            lr,
            beta1: S::from_f64_lossy(0.9),
            beta2: S::from_f64_lossy(0.999),
            eps: S::from_f64_lossy(1e-8),
            weight_decay: S::from_f64_lossy(0.01),
        }
    }
}

pub struct AdamW<S> {
    pub cfg: AdamWConfig<S>,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Num> AdamW<S> {
    pub fn new(cfg: AdamWConfig<S>, param_sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: S) {
        self.cfg.lr = lr;
    }

    /// One update over all parameters.  `params[i]` and `grads[i]` must have
    /// the lengths this optimizer was built with.
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &[&[S]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Training(format!(
                "optimizer built for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c = self.cfg;
        let bc1 = S::one() - c.beta1.powi(t);
        let bc2 = S::one() - c.beta2.powi(t);
        let decay_mul = S::one() - c.lr * c.weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Training(format!(
                    "param/grad size {} / {} vs optimizer state {}",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
            for i in 0..p.len() {
                let gi = g[i];
                p[i] = p[i] * decay_mul;
                m[i] = c.beta1 * m[i] + (S::one() - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (S::one() - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over all gradient buffers jointly.
pub fn global_grad_norm<S: Num>(grads: &[Vec<S>]) -> S {
    let mut acc = S::zero();
    for g in grads {
        for &x in g {
            acc = acc + x * x;
        }
    }
    acc.sqrt()
}

/// Scale all buffers so the global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Num>(grads: &mut [Vec<S>], max_norm: S) -> S {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > S::zero() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}
