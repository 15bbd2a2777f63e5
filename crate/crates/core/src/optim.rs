//! SGD with classic momentum, L2 weight decay folded into the gradient, and
//! a half-cosine learning-rate schedule.

use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.004, momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Debug)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, store: &ParamStore) -> Self {
        assert!(cfg.lr > 0.0, "learning rate must be positive");
        let velocity = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { cfg, velocity }
    }

    /// One update over every parameter carrying a gradient:
    /// `v <- momentum*v + (g + wd*p)`, `p <- p - lr*v`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let (momentum, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad.take() else { continue };
            let vel = &mut self.velocity[i];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j] + wd * data[j];
                vel[j] = momentum * vel[j] + g;
                data[j] -= lr * vel[j];
            }
        }
    }
}

/// Half-cosine decay from `initial` at epoch 0 towards 0 at `total` epochs.
pub fn cosine_lr(initial: f64, epoch: usize, total: usize) -> f64 {
    assert!(total > 0);
    let e = epoch.min(total) as f64;
    initial * 0.5 * (1.0 + (std::f64::consts::PI * e / total as f64).cos())
}
