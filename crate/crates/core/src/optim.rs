//! Adam and the learning-rate schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::siren::Module;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter group. Each group counts its own steps,
/// so a group that sits out (learning rate 0) resumes with correct bias
/// correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new<M: Module<F> + ?Sized>(module: &M, config: AdamConfig) -> Self {
        let zeros: Vec<_> = module.params().iter().map(|p| Array2::zeros(p.dim())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; a zero rate leaves both the
    /// parameters and the moments untouched.
    pub fn update<M: Module<F> + ?Sized>(&mut self, module: &mut M, grads: &[Array2<F>], lr: f64) {
        if lr == 0.0 {
            return;
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (c1, c2) = (F::one() - b1, F::one() - b2);
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(eps);
        for (((p, g), m), v) in module.params_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }
}

/// Constant `lr_init` until `anneal_start`, then cosine decay to `lr_final`
/// at `t = 1`.
pub fn learning_rate(t: f64, lr_init: f64, lr_final: f64, anneal_start: f64) -> f64 {
    if t <= anneal_start || anneal_start >= 1.0 {
        return lr_init;
    }
    let u = ((t - anneal_start) / (1.0 - anneal_start)).min(1.0);
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * u).cos())
}
