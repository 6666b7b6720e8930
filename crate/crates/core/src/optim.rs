//! Adam with bias correction, and the critic weight-clipping constraint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, cfg: &AdamConfig) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient(alloc::string::String::new()));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::from_f64(1.0 - libm::pow(cfg.beta1, t as f64));
        let bc2 = T::from_f64(1.0 - libm::pow(cfg.beta2, t as f64));
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
        let one = T::ONE;
        let p = param.data_mut();
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Clamps every value into `[-c, c]`; values already inside are untouched.
pub fn clip_weights<T: Real>(params: &mut [T], c: T) {
    debug_assert!(c > T::ZERO);
    for w in params.iter_mut() {
        if *w > c {
            *w = c;
        } else if *w < -c {
            *w = -c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::<f64>::new(&[3]);
        st.step(&mut p, &Tensor::zeros(&[3]), &AdamConfig::default())
            .unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap();
        let g = Tensor::from_f64(&[2], &[3.5, -0.2]).unwrap();
        let mut st = AdamState::<f64>::new(&[2]);
        st.step(&mut p, &g, &cfg).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-8);
        assert!((p.data()[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        // g = 1 each step, lr = 1e-3, defaults otherwise.
        // t=1: m=0.1, v=0.001, m^=1, v^=1          -> step 1e-3/(1+1e-8)
        // t=2: m=0.19, v=0.001999, m^=0.19/0.19=1, v^=0.001999/0.001999=1
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut p = Tensor::scalar(0.0f64);
        let g = Tensor::scalar(1.0f64);
        let mut st = AdamState::new(&[]);
        st.step(&mut p, &g, &cfg).unwrap();
        let after_one = -1e-3 / (1.0 + 1e-8);
        assert!((p.item().unwrap() - after_one).abs() < 1e-15);
        st.step(&mut p, &g, &cfg).unwrap();
        let m1: f64 = 1.0 - 0.9;
        let v1: f64 = 1.0 - 0.999;
        let m2 = 0.9 * m1 + (1.0 - 0.9);
        let v2 = 0.999 * v1 + (1.0 - 0.999);
        let m_hat = m2 / (1.0 - 0.81);
        let v_hat = v2 / (1.0 - 0.998001);
        let expected = after_one - 1e-3 * m_hat / (libm::sqrt(v_hat) + 1e-8);
        assert!((p.item().unwrap() - expected).abs() < 1e-15);
        assert!((st.m.item().unwrap() - m2).abs() < 1e-16);
        assert!((st.v.item().unwrap() - v2).abs() < 1e-18);
    }

    #[test]
    fn zero_lr_is_identity() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut p = Tensor::<f64>::from_f64(&[2], &[0.3, 0.7]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[2]);
        for _ in 0..5 {
            st.step(&mut p, &Tensor::from_f64(&[2], &[1.0, -4.0]).unwrap(), &cfg)
                .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = Tensor::scalar(0.0f32);
        let mut st = AdamState::<f32>::new(&[]);
        assert!(st
            .step(&mut p, &Tensor::scalar(f32::NAN), &AdamConfig::default())
            .is_err());
        assert!(st
            .step(&mut p, &Tensor::zeros(&[2]), &AdamConfig::default())
            .is_err());
        assert_eq!(st.t, 0);
    }

    #[test]
    fn clipping_cases() {
        let c = 0.01f64;
        let mut w = vec![0.005, -0.01, 0.0, 2.0 * c, -5.0 * c];
        clip_weights(&mut w, c);
        assert_eq!(w, vec![0.005, -0.01, 0.0, c, -c]);
    }
}
