//! Gradient-descent optimizers over a [`ParamStore`].
//!
//! Both optimizers fold weight decay into the gradient before any moment
//! update and skip buffers and frozen parameters. A trainable parameter with
//! no gradient is a caller bug and fails loudly.

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamKind, ParamStore};
use crate::tensor::Scalar;

/// Learning rate at `step` of a cosine decay from `lr_max` to `lr_min` over
/// `total_steps`.
pub fn cosine_annealing_lr(
    step: usize,
    total_steps: usize,
    lr_max: f64,
    lr_min: f64,
) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "schedule step {step} beyond total {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Classic momentum SGD: v = momentum * v + (g + wd * p), p -= lr * v.
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize_with(store.len(), || None);
        }
        let mu = T::from_f(self.momentum);
        let wd = T::from_f(self.weight_decay);
        let lr = T::from_f(lr);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get(id);
            if !p.trainable || p.kind != ParamKind::Weight {
                continue;
            }
            let g = grads.get(id).ok_or_else(|| {
                Error::contract(format!("no gradient for trainable parameter {}", p.name))
            })?;
            let n = p.value.numel();
            debug_assert_eq!(g.len(), n);
            let vel = self.velocity[id.0].get_or_insert_with(|| vec![T::zero(); n]);
            let value = store.value_mut(id).data_mut();
            for j in 0..n {
                let eff = g[j] + wd * value[j];
                vel[j] = mu * vel[j] + eff;
                value[j] -= lr * vel[j];
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        if self.m.len() < store.len() {
            self.m.resize_with(store.len(), || None);
            self.v.resize_with(store.len(), || None);
        }
        self.t += 1;
        let b1 = T::from_f(self.beta1);
        let b2 = T::from_f(self.beta2);
        let one = T::one();
        let bc1 = T::from_f(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::from_f(self.eps);
        let wd = T::from_f(self.weight_decay);
        let lr = T::from_f(lr);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get(id);
            if !p.trainable || p.kind != ParamKind::Weight {
                continue;
            }
            let g = grads.get(id).ok_or_else(|| {
                Error::contract(format!("no gradient for trainable parameter {}", p.name))
            })?;
            let n = p.value.numel();
            debug_assert_eq!(g.len(), n);
            let m = self.m[id.0].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[id.0].get_or_insert_with(|| vec![T::zero(); n]);
            let value = store.value_mut(id).data_mut();
            for (j, pv) in value.iter_mut().enumerate() {
                let eff = g[j] + wd * *pv;
                m[j] = b1 * m[j] + (one - b1) * eff;
                v[j] = b2 * v[j] + (one - b2) * eff * eff;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Session;
    use crate::tensor::Tensor;

    fn one_param_store(value: f64) -> (ParamStore<f64>, crate::nn::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add_weight("p", Tensor::scalar(value));
        (store, id)
    }

    fn grads_of_identity_loss(store: &mut ParamStore<f64>, id: crate::nn::ParamId, scale: f64) -> Grads<f64> {
        // loss = scale * p, so dL/dp = scale.
        let mut sess = Session::new(store, true);
        let p = sess.param(id);
        let scaled = sess.tape.scale(p, scale).unwrap();
        let loss = sess.tape.sum_all(scaled).unwrap();
        sess.backward(loss).unwrap();
        sess.into_grads()
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (mut store, id) = one_param_store(1.0);
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..2 {
            let grads = grads_of_identity_loss(&mut store, id, 1.0);
            opt.step(&mut store, &grads, 0.1).unwrap();
        }
        // v1 = 1, p = 0.9; v2 = 1.9, p = 0.9 - 0.19 = 0.71
        assert!((store.value(id).item().unwrap() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn sgd_single_step_and_unit_lr_recursion() {
        // v=0, g=1, lr=0.1: p drops by exactly 0.1.
        let (mut store, id) = one_param_store(1.0);
        let mut opt = Sgd::new(0.9, 0.0);
        let grads = grads_of_identity_loss(&mut store, id, 1.0);
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert!((store.value(id).item().unwrap() - 0.9).abs() < 1e-12);

        // lr=1, two steps with g=1: decreases by 1 then 1.9, total 2.9.
        let (mut store, id) = one_param_store(0.0);
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..2 {
            let grads = grads_of_identity_loss(&mut store, id, 1.0);
            opt.step(&mut store, &grads, 1.0).unwrap();
        }
        assert!((store.value(id).item().unwrap() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adam_unit_gradient_first_step() {
        let (mut store, id) = one_param_store(0.5);
        let mut opt = Adam::new(0.0);
        let grads = grads_of_identity_loss(&mut store, id, 1.0);
        opt.step(&mut store, &grads, 0.001).unwrap();
        // Bias correction makes mhat/sqrt(vhat) = 1 on the first step.
        assert!((store.value(id).item().unwrap() - 0.499).abs() < 1e-9);
    }

    #[test]
    fn sgd_weight_decay_pulls_toward_zero() {
        let (mut store, id) = one_param_store(1.0);
        let mut opt = Sgd::new(0.0, 0.1);
        let grads = grads_of_identity_loss(&mut store, id, 0.0);
        opt.step(&mut store, &grads, 1.0).unwrap();
        // g = 0 + 0.1 * 1, p = 1 - 0.1
        assert!((store.value(id).item().unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let (mut store, id) = one_param_store(0.0);
        let mut opt = Adam::new(0.0);
        let grads = grads_of_identity_loss(&mut store, id, 3.0);
        opt.step(&mut store, &grads, 0.01).unwrap();
        let p = store.value(id).item().unwrap();
        assert!((p + 0.01).abs() < 1e-8, "got {p}");
    }

    #[test]
    fn missing_grad_for_trainable_param_is_an_error() {
        let (mut store, _id) = one_param_store(1.0);
        let other = store.add_weight("q", Tensor::scalar(2.0));
        let grads = {
            // Loss touches only q, leaving p without a gradient.
            let mut sess = Session::new(&mut store, true);
            let q = sess.param(other);
            let loss = sess.tape.sum_all(q).unwrap();
            sess.backward(loss).unwrap();
            sess.into_grads()
        };
        let mut opt = Sgd::new(0.9, 0.0);
        assert!(opt.step(&mut store, &grads, 0.1).is_err());
    }

    #[test]
    fn buffers_are_never_stepped() {
        let mut store = ParamStore::<f64>::new();
        let buf = store.add_buffer("buf", Tensor::scalar(5.0));
        let w = store.add_weight("w", Tensor::scalar(1.0));
        let grads = grads_of_identity_loss(&mut store, w, 1.0);
        let mut opt = Sgd::new(0.0, 0.0);
        opt.step(&mut store, &grads, 0.5).unwrap();
        assert_eq!(store.value(buf).item().unwrap(), 5.0);
        assert!((store.value(w).item().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let (hi, lo) = (0.1, 0.001);
        assert!((cosine_annealing_lr(0, 100, hi, lo).unwrap() - hi).abs() < 1e-15);
        assert!((cosine_annealing_lr(100, 100, hi, lo).unwrap() - lo).abs() < 1e-15);
        assert!((cosine_annealing_lr(100, 100, hi, 0.0).unwrap()).abs() < 1e-15);
        let mid = cosine_annealing_lr(50, 100, hi, 0.0).unwrap();
        assert!((mid - hi / 2.0).abs() < 1e-12);
        // Monotone decreasing over the schedule.
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_annealing_lr(s, 100, hi, lo).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        assert!(cosine_annealing_lr(101, 100, hi, lo).is_err());
        assert!(cosine_annealing_lr(0, 0, hi, lo).is_err());
    }
}
