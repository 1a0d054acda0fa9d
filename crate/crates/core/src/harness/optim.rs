use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::config::OptimizerConfig;

/// Adam with decoupled weight decay.
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .ids()
            .map(|id| vec![0.0; params.get(id).numel()])
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Step learning rate at `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .cfg
            .lr_drop_epochs
            .iter()
            .filter(|&&e| e <= epoch)
            .count();
        self.cfg.lr * self.cfg.lr_gamma.powi(drops as i32)
    }

    /// One update; `grads[i]` belongs to parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p.data[k] -=
                    lr * (mh / (vh.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p.data[k]);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}
