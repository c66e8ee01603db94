//! Optimizers and the learning-rate schedule.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::Contract("cosine schedule needs total_epochs >= 1".into()));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_epochs,
        })
    }

    /// Schedule whose endpoints land on the first and last of `epochs` epochs.
    pub fn spanning(lr_max: f64, lr_min: f64, epochs: usize) -> Self {
        Self {
            lr_max,
            lr_min,
            total_epochs: epochs.saturating_sub(1).max(1),
        }
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let t = epoch as f64 / self.total_epochs as f64;
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * t).cos()))
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, epoch: usize) -> Result<f64> {
    schedule.lr(epoch)
}

fn grad_of<'a>(store: &'a ParamStore, id: ParamId) -> Result<&'a [f64]> {
    store
        .get(id)
        .grad
        .as_ref()
        .map(|g| g.data())
        .ok_or_else(|| Error::Contract(format!("parameter `{}` has no gradient", store.get(id).name)))
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        for &id in ids {
            grad_of(store, id)?;
        }
        for &id in ids {
            let grad = grad_of(store, id)?.to_vec();
            let value = store.value_mut(id).data_mut();
            let buf = self.buffers.entry(id).or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, g), v) in value.iter_mut().zip(&grad).zip(buf.iter_mut()) {
                let d = g + self.weight_decay * *p;
                *v = self.momentum * *v + d;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            state: HashMap::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            grad_of(store, id)?;
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for &id in ids {
            let grad = grad_of(store, id)?.to_vec();
            let value = store.value_mut(id).data_mut();
            let (m, v) = self
                .state
                .entry(id)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for i in 0..grad.len() {
                let g = grad[i] + self.weight_decay * value[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients of `ids` so their global norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = store.grad_norm(ids);
    if norm > max_norm {
        store.scale_grads(ids, max_norm / (norm + 1e-6));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Role::Weight, Tensor::from_vec(vec![value]));
        (s, id)
    }

    fn set_grad(s: &mut ParamStore, id: ParamId, g: f64) {
        s.get_mut(id).grad = Some(Tensor::from_vec(vec![g]));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = CosineSchedule::new(0.025, 0.001, 300).unwrap();
        assert!((s.lr(0).unwrap() - 0.025).abs() < 1e-15);
        assert!((s.lr(300).unwrap() - 0.001).abs() < 1e-15);
        assert!((s.lr(150).unwrap() - 0.013).abs() < 1e-15);
        assert!(s.lr(301).is_err());
        let lrs: Vec<f64> = (0..=300).map(|e| s.lr(e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sgd_plain_step() {
        let (mut s, id) = one_param(1.0);
        set_grad(&mut s, id, 1.0);
        Sgd::new(0.0, 0.0).step(&mut s, &[id], 0.1).unwrap();
        assert!((s.value(id).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_no_decay_is_identity() {
        let (mut s, id) = one_param(0.37);
        set_grad(&mut s, id, 0.0);
        Sgd::new(0.9, 0.0).step(&mut s, &[id], 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 0.37);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (mut s, id) = one_param(0.0);
        let mut opt = Sgd::new(0.9, 0.0);
        // Hand-rolled recurrence v <- 0.9 v + g, p <- p - lr v.
        let (mut v, mut p) = (0.0f64, 0.0f64);
        for _ in 0..2 {
            set_grad(&mut s, id, 1.0);
            opt.step(&mut s, &[id], 0.1).unwrap();
            v = 0.9 * v + 1.0;
            p -= 0.1 * v;
        }
        assert!((p + 0.29).abs() < 1e-15);
        assert!((s.value(id).data()[0] - p).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let (mut s, id) = one_param(1.0);
        assert!(matches!(Sgd::new(0.9, 0.0).step(&mut s, &[id], 0.1), Err(Error::Contract(_))));
        assert!(matches!(Adam::new(1e-3, 0.9, 0.999, 1e-8, 0.0).step(&mut s, &[id]), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let (mut s, id) = one_param(2.5);
        let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..5 {
            set_grad(&mut s, id, 0.0);
            opt.step(&mut s, &[id]).unwrap();
        }
        assert_eq!(s.value(id).data()[0], 2.5);
    }

    #[test]
    fn adam_first_step_is_minus_lr_sign() {
        let (mut s, id) = one_param(0.0);
        set_grad(&mut s, id, 1.0);
        Adam::new(1e-3, 0.9, 0.999, 1e-8, 0.0).step(&mut s, &[id]).unwrap();
        assert!((s.value(id).data()[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_matches_scalar_reimplementation() {
        let (mut s, id) = one_param(0.5);
        let mut opt = Adam::new(1e-2, 0.9, 0.999, 1e-8, 1e-3);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            set_grad(&mut s, id, 0.7);
            opt.step(&mut s, &[id]).unwrap();
            let g = 0.7 + 1e-3 * p;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 1e-2 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.value(id).data()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let (mut s, id) = one_param(0.0);
        set_grad(&mut s, id, 10.0);
        clip_grad_norm(&mut s, &[id], 5.0);
        assert!(s.grad_norm(&[id]) <= 5.0);
    }
}
