use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Element, ParamId, ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};

/// SGD with plain (heavy-ball) momentum and L2 weight decay folded into the
/// gradient:
///
/// ```text
/// v ← μ·v + g + wd·θ
/// θ ← θ − lr·v
/// ```
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    velocity: HashMap<ParamId, Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay {weight_decay} is negative")));
        }
        Ok(Self {
            momentum,
            weight_decay,
            lr,
            velocity: HashMap::new(),
        })
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[T]> {
        self.velocity.get(&id).map(|v| v.as_slice())
    }

    /// Applies one update to every listed weight that carries a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) {
        let mu = T::of(self.momentum);
        let wd = T::of(self.weight_decay);
        let lr = T::of(self.lr);
        for &id in ids {
            let p = store.get(id);
            if p.kind != ParamKind::Weight {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let theta = p.value.data();
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![T::zero(); theta.len()]);
            let mut next = Vec::with_capacity(theta.len());
            for ((vi, &g), &t) in v.iter_mut().zip(grad.data()).zip(theta) {
                *vi = mu * *vi + g + wd * t;
                next.push(t - lr * *vi);
            }
            let shape = p.value.shape().to_vec();
            store.get_mut(id).value = Tensor::from_parts(shape, next);
        }
    }
}

/// Linear warm-up from `lr_min` to `lr_max`, then cosine decay to `lr_min`
/// at the final epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Input(format!(
                "epoch {epoch} outside 0..{}",
                self.total_epochs
            )));
        }
        let span = self.lr_max - self.lr_min;
        if epoch < self.warmup_epochs {
            return Ok(self.lr_min + span * epoch as f64 / self.warmup_epochs as f64);
        }
        let decay_epochs = self.total_epochs - 1 - self.warmup_epochs.min(self.total_epochs - 1);
        if decay_epochs == 0 {
            return Ok(self.lr_max);
        }
        let progress = (epoch - self.warmup_epochs) as f64 / decay_epochs as f64;
        Ok(self.lr_min + 0.5 * span * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 < lr_min ≤ lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warm-up of {} epochs does not fit {} total",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> LrSchedule {
        LrSchedule {
            lr_max: 3e-2,
            lr_min: 5e-3,
            warmup_epochs: 5,
            total_epochs: 300,
        }
    }

    fn single(theta: f64, grad: f64, lr: f64, mu: f64, wd: f64) -> (ParamStore<f64>, ParamId, Sgd<f64>) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(theta), ParamKind::Weight);
        store.get_mut(id).grad = Some(Tensor::scalar(grad));
        (store, id, Sgd::new(lr, mu, wd).unwrap())
    }

    #[test]
    fn plain_gradient_descent() {
        let (mut store, id, mut sgd) = single(1.0, 0.5, 1.0, 0.0, 0.0);
        sgd.step(&mut store, &[id]);
        assert_eq!(store.value(id).data()[0], 0.5);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut store, id, mut sgd) = single(0.7, 0.0, 0.1, 0.9, 0.0);
        sgd.step(&mut store, &[id]);
        sgd.step(&mut store, &[id]);
        assert_eq!(store.value(id).data()[0], 0.7);
    }

    #[test]
    fn momentum_matches_scalar_recurrence() {
        let grads = [0.3, -0.2, 0.5];
        let (lr, mu, wd) = (0.05, 0.9, 1e-4);
        let (mut store, id, mut sgd) = single(1.5, grads[0], lr, mu, wd);
        let (mut theta, mut v) = (1.5f64, 0.0f64);
        for &g in &grads {
            store.get_mut(id).grad = Some(Tensor::scalar(g));
            sgd.step(&mut store, &[id]);
            v = mu * v + g + wd * theta;
            theta -= lr * v;
        }
        assert!((store.value(id).data()[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn buffers_and_gradless_weights_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        let b = store.insert("rm", Tensor::scalar(2.0), ParamKind::Buffer);
        let w = store.insert("w", Tensor::scalar(2.0), ParamKind::Weight);
        store.get_mut(b).grad = Some(Tensor::scalar(1.0));
        let mut sgd = Sgd::new(0.1, 0.9, 0.0).unwrap();
        sgd.step(&mut store, &[b, w]);
        assert_eq!(store.value(b).data()[0], 2.0);
        assert_eq!(store.value(w).data()[0], 2.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::<f32>::new(0.1, 1.0, 0.0).is_err());
        assert!(Sgd::<f32>::new(0.0, 0.9, 0.0).is_err());
    }

    #[test]
    fn warmup_reaches_peak() {
        assert_eq!(paper().lr_at(5).unwrap(), 3e-2);
        assert_eq!(paper().lr_at(0).unwrap(), 5e-3);
    }

    #[test]
    fn final_epoch_is_minimum() {
        assert!((paper().lr_at(299).unwrap() - 5e-3).abs() < 1e-6);
    }

    #[test]
    fn cosine_midpoint() {
        // 294 decay epochs after the warm-up end at epoch 5.
        assert!((paper().lr_at(5 + 147).unwrap() - (3e-2 + 5e-3) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_epoch() {
        assert!(matches!(paper().lr_at(300), Err(Error::Input(_))));
    }

    #[test]
    fn bounded_and_continuous() {
        let s = paper();
        for e in s.warmup_epochs..s.total_epochs {
            let lr = s.lr_at(e).unwrap();
            assert!(lr >= s.lr_min - 1e-15 && lr <= s.lr_max + 1e-15);
        }
        // One warm-up step is (max − min)/5; the first cosine step is tiny.
        let step_in = s.lr_at(5).unwrap() - s.lr_at(4).unwrap();
        let step_out = s.lr_at(5).unwrap() - s.lr_at(6).unwrap();
        assert!((step_in - (s.lr_max - s.lr_min) / 5.0).abs() < 1e-12);
        assert!(step_out >= 0.0 && step_out < 1e-4);
    }
}
