//! Adam with bias correction, keyed by parameter name.
//!
//! Moments live in a BTreeMap so checkpoint serialization is deterministic.
//! The learning rate is public; the trainer halves it on validation
//! regressions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Adam<S: Scalar> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    /// Advance the shared step counter; call once per batch, before the
    /// per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    /// One update; returns the new parameter value. A parameter whose
    /// gradient has been zero since the start stays bit-identical.
    pub fn update(&mut self, name: &str, param: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
        if grad.shape() != param.shape() {
            return Err(Error::shape(
                "adam",
                crate::tensor::fmt_shape(param.shape()),
                format!("gradient {} for {name}", crate::tensor::fmt_shape(grad.shape())),
            ));
        }
        if !grad.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for {name}")));
        }
        assert!(self.t > 0, "begin_step before update");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let b1 = S::of_f64(self.beta1);
        let b2 = S::of_f64(self.beta2);
        let one = S::one();
        let corr1 = S::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = S::of_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::of_f64(self.lr);
        let eps = S::of_f64(self.eps);

        let mut m_new = Vec::with_capacity(param.len());
        let mut v_new = Vec::with_capacity(param.len());
        let mut p_new = Vec::with_capacity(param.len());
        for i in 0..param.len() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * g;
            let vi = b2 * v.data()[i] + (one - b2) * g * g;
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            m_new.push(mi);
            v_new.push(vi);
            p_new.push(param.data()[i] - lr * m_hat / (v_hat.sqrt() + eps));
        }
        *m = Tensor::new(param.shape().to_vec(), m_new);
        *v = Tensor::new(param.shape().to_vec(), v_new);
        Ok(Tensor::new(param.shape().to_vec(), p_new))
    }

    /// Deterministic iteration over moment state, for checkpoints.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &(Tensor<S>, Tensor<S>))> {
        self.moments.iter()
    }

    pub fn insert_moments(&mut self, name: String, m: Tensor<S>, v: Tensor<S>) {
        self.moments.insert(name, (m, v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand recursion of the update rule in plain f64.
    fn oracle(grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p
    }

    #[test]
    fn matches_hand_recursion() {
        let grads = [0.3, -0.7, 0.05, 1.2];
        let mut opt = Adam::<f64>::new(1e-2);
        let mut p = Tensor::scalar(1.0);
        for &g in &grads {
            opt.begin_step();
            p = opt.update("w", &p, &Tensor::scalar(g)).unwrap();
        }
        let expect = oracle(&grads, 1e-2);
        assert!((p.item() - expect).abs() < 1e-15, "{} vs {}", p.item(), expect);
    }

    #[test]
    fn first_step_magnitude_is_bounded_by_lr() {
        // With any single nonzero gradient, |delta| <= lr up to the eps slack.
        for g in [1e-6, 0.5, 3e4] {
            let mut opt = Adam::<f64>::new(1e-3);
            opt.begin_step();
            let p = opt.update("w", &Tensor::scalar(0.0), &Tensor::scalar(g)).unwrap();
            assert!(p.item() < 0.0 && p.item().abs() <= 1e-3 + 1e-12, "g={g}: {}", p.item());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut opt = Adam::<f32>::new(1e-3);
        let p0 = Tensor::<f32>::from_fn(&[3], |i| i as f32);
        let mut p = p0.clone();
        for _ in 0..3 {
            opt.begin_step();
            p = opt.update("w", &p, &Tensor::zeros(&[3])).unwrap();
        }
        assert_eq!(p.data(), p0.data());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut opt = Adam::<f32>::new(1e-3);
        opt.begin_step();
        let err = opt
            .update("enc.0.w", &Tensor::scalar(1.0), &Tensor::scalar(f32::NAN))
            .unwrap_err()
            .to_string();
        assert!(err.contains("enc.0.w"), "{err}");
    }

    #[test]
    fn momentum_continues_after_gradient_stops() {
        // A step with zero gradient after a nonzero one still moves the
        // parameter: the first moment has memory.
        let mut opt = Adam::<f64>::new(1e-3);
        opt.begin_step();
        let p1 = opt.update("w", &Tensor::scalar(1.0), &Tensor::scalar(1.0)).unwrap();
        opt.begin_step();
        let p2 = opt.update("w", &p1, &Tensor::scalar(0.0)).unwrap();
        assert!((p2.item() - p1.item()).abs() > 1e-6);
    }
}
