//! Optimizers for the bi-level loop: momentum SGD with cosine annealing for
//! network weights, Adam with multi-step decay for architecture parameters.
//!
//! A parameter with no accumulated gradient is treated as having a zero
//! gradient. Callers zero gradients between steps; optimizers never do.

use crate::tensor::{Elem, Tensor};

pub struct MomentumSgd<E: Elem> {
    params: Vec<Tensor<E>>,
    velocity: Vec<Vec<E>>,
    pub base_lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub lr: f64,
}

impl<E: Elem> MomentumSgd<E> {
    pub fn new(params: Vec<Tensor<E>>, base_lr: f64, min_lr: f64, momentum: f64) -> Self {
        let velocity = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        MomentumSgd {
            params,
            velocity,
            base_lr,
            min_lr,
            momentum,
            lr: base_lr,
        }
    }

    /// Cosine annealing from `base_lr` (epoch 0) down to `min_lr` (last epoch).
    pub fn set_cosine_lr(&mut self, epoch: usize, total_epochs: usize) {
        let frac = if total_epochs <= 1 {
            if epoch == 0 {
                0.0
            } else {
                1.0
            }
        } else {
            (epoch.min(total_epochs) as f64) / ((total_epochs - 1) as f64)
        };
        let cos = (std::f64::consts::PI * frac.min(1.0)).cos();
        self.lr = self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + cos);
    }

    pub fn step(&mut self) {
        let lr = E::from_f64c(self.lr);
        let mom = E::from_f64c(self.momentum);
        for (p, v) in self.params.iter().zip(self.velocity.iter_mut()) {
            let g = p.grad_vec();
            p.update_data(|data| {
                for i in 0..data.len() {
                    let gi = g.as_ref().map_or(E::zero(), |g| g[i]);
                    v[i] = mom * v[i] + gi;
                    data[i] -= lr * v[i];
                }
            });
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }
}

pub struct Adam<E: Elem> {
    params: Vec<Tensor<E>>,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl<E: Elem> Adam<E> {
    pub fn new(params: Vec<Tensor<E>>, base_lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            base_lr,
            beta1,
            beta2,
            eps: 1e-8,
            lr: base_lr,
        }
    }

    /// Multiply the learning rate by `gamma` at each milestone epoch passed.
    pub fn set_multistep_lr(&mut self, epoch: usize, milestones: &[usize], gamma: f64) {
        let hits = milestones.iter().filter(|m| epoch >= **m).count();
        self.lr = self.base_lr * gamma.powi(hits as i32);
    }

    pub fn step(&mut self) {
        self.t += 1;
        let lr = self.lr;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.eps;
        for ((p, m), v) in self.params.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = p.grad_vec();
            p.update_data(|data| {
                for i in 0..data.len() {
                    let gi = g.as_ref().map_or(0.0, |g| g[i].to_f64c());
                    let mi = b1 * m[i].to_f64c() + (1.0 - b1) * gi;
                    let vi = b2 * v[i].to_f64c() + (1.0 - b2) * gi * gi;
                    m[i] = E::from_f64c(mi);
                    v[i] = E::from_f64c(vi);
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    data[i] -= E::from_f64c(lr * mhat / (vhat.sqrt() + eps));
                }
            });
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }
}
