//! Stochastic gradient descent and the step-decay learning-rate schedule.

use crate::param::ParamStore;
use crate::{Error, Result, Scalar, Tensor};

/// Everything a training loop needs to know about batches and step sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSchedule {
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr0: f64,
    /// The learning rate is divided by 10 every `decay_every` iterations.
    pub decay_every: usize,
    pub iterations: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for the denoiser's output projection.
    pub output_lr_scale: f64,
}

impl OptimizerSchedule {
    /// Values used for the full-size denoiser: batch 32, 48x48 patches,
    /// lr 1e-4 divided by 10 every 500k iterations, 1.5M iterations.
    pub fn full_scale() -> Self {
        OptimizerSchedule {
            batch_size: 32,
            patch_size: 48,
            lr0: 1e-4,
            decay_every: 500_000,
            iterations: 1_500_000,
            momentum: 0.0,
            weight_decay: 0.0,
            output_lr_scale: 1.0,
        }
    }

    /// Single-machine defaults: 20k iterations, decay every 8k, batch 16.
    pub fn desk_scale() -> Self {
        OptimizerSchedule {
            batch_size: 16,
            patch_size: 32,
            lr0: 10.0,
            decay_every: 8_000,
            iterations: 20_000,
            momentum: 0.9,
            weight_decay: 0.0,
            output_lr_scale: 0.003,
        }
    }

    /// Joint-loss finetuning of a warm-started desk-scale denoiser: 500
    /// iterations at a much lower rate, since task-loss gradients reaching the
    /// denoiser are orders of magnitude larger than reconstruction gradients.
    pub fn desk_joint() -> Self {
        OptimizerSchedule {
            lr0: 5e-4,
            decay_every: 333,
            iterations: 500,
            ..Self::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::invalid("batch and patch size must be positive"));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.decay_every == 0 {
            return Err(Error::invalid("decay_every must be positive"));
        }
        if !(self.output_lr_scale.is_finite() && self.output_lr_scale > 0.0) {
            return Err(Error::invalid("output_lr_scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("momentum must be in [0, 1) and weight decay >= 0"));
        }
        Ok(())
    }

    /// `lr0 * 10^-(iteration / decay_every)` with integer division.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = (iteration / self.decay_every) as i32;
        self.lr0 * 10f64.powi(-drops)
    }
}

/// Plain SGD update `value -= lr * grad` on trainable parameters, then clears
/// all gradients. Fails without touching anything if a trainable parameter
/// has no gradient.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64) -> Result<()> {
    Sgd::new(0.0, 0.0).step(store, lr)
}

/// SGD with optional heavy-ball momentum and L2 weight decay (both default 0).
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Scalar = f32> {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn from_schedule(s: &OptimizerSchedule) -> Self {
        Self::new(s.momentum, s.weight_decay)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(p) = store.params().iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::Training(format!(
                "trainable parameter {:?} has no gradient",
                p.name
            )));
        }
        let mom = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let plain = self.momentum == 0.0 && self.weight_decay == 0.0;
        self.velocity.resize_with(store.params().len(), || None);
        for (p, vel) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            let grad = p.grad.take();
            if !p.trainable {
                continue;
            }
            let grad = grad.expect("checked above");
            let lr_t = T::from_f64_lossy(lr * p.lr_scale);
            if plain {
                for (w, &g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                    *w = *w - lr_t * g;
                }
                continue;
            }
            let v = vel.get_or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((w, vv), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vv = mom * *vv + g + wd * *w;
                *w = *w - lr_t * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(w: f32, g: f32, trainable: bool) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.add_param("w", Tensor::full(&[1], w)).unwrap();
        let p = s.get_mut(id);
        p.grad = Some(Tensor::full(&[1], g));
        p.trainable = trainable;
        s
    }

    #[test]
    fn plain_step_and_clear() {
        let mut s = store_with_grad(1.0, 2.0, true);
        sgd_step(&mut s, 0.1).unwrap();
        assert!((s.params()[0].value.data()[0] - 0.8).abs() < 1e-7);
        assert!(s.params()[0].grad.is_none());
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let w = 0.123_456_79_f32;
        let mut s = store_with_grad(w, 2.0, false);
        sgd_step(&mut s, 0.1).unwrap();
        assert_eq!(s.params()[0].value.data()[0].to_bits(), w.to_bits());
        assert!(s.params()[0].grad.is_none());
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = store_with_grad(1.0, 2.0, true);
        s.params_mut()[0].grad = None;
        assert!(matches!(sgd_step(&mut s, 0.1), Err(Error::Training(_))));
        assert_eq!(s.params()[0].value.data()[0], 1.0);
    }

    #[test]
    fn step_decay_divides_by_ten() {
        let mut s = OptimizerSchedule::full_scale();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(499_999), 1e-4);
        assert!((s.lr_at(500_000) - 1e-5).abs() < 1e-20);
        assert!((s.lr_at(1_000_000) - 1e-6).abs() < 1e-21);
        s.decay_every = 8_000;
        s.lr0 = 0.05;
        assert!((s.lr_at(8_000) - 0.005).abs() < 1e-15);
        assert!((s.lr_at(16_000) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut s = store_with_grad(1.0, 1.0, true);
        let mut opt = Sgd::new(0.5, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        s.params_mut()[0].grad = Some(Tensor::full(&[1], 1.0));
        opt.step(&mut s, 0.1).unwrap();
        // v1 = 1, v2 = 1.5 -> w = 1 - 0.1 - 0.15
        assert!((s.params()[0].value.data()[0] - 0.75).abs() < 1e-6);
    }
}
