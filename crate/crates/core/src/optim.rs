//! Adam with bias correction and optional coupled weight decay.

use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::{Error, Scalar, Tensor};

/// Adam hyperparameters. The defaults are the DCGAN training settings:
/// learning rate 2e-4 and first-moment decay 0.5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 decay: `wd * theta` is added to the gradient before the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment buffers and step counter for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape());
        Self { config, step: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }
}

fn check_grads<T: Scalar>(params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(contract!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(contract!("parameter {i}: shape {:?} but gradient {:?}", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(alloc::format!("gradient of parameter {i}")));
        }
    }
    Ok(())
}

/// One Adam update. Nothing is modified if any gradient is mismatched or non-finite.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    check_grads(params, grads)?;
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(contract!("optimizer state does not match the parameter set"));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - num_traits::Float::powi(c.beta1, t));
    let bc2 = T::of(1.0 - num_traits::Float::powi(c.beta2, t));
    let (lr, eps, wd) = (T::of(c.lr), T::of(c.eps), T::of(c.weight_decay));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((theta, &grad), (mi, vi)) in it {
            let grad = if c.weight_decay != 0.0 { grad + wd * *theta } else { grad };
            *mi = b1 * *mi + (T::one() - b1) * grad;
            *vi = b2 * *vi + (T::one() - b2) * grad * grad;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent, `theta -= lr * g`.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    let lr = T::of(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        for (theta, &grad) in p.data_mut().iter_mut().zip(g.data()) {
            *theta = *theta - lr * grad;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn defaults_match_dcgan_settings() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps, c.weight_decay), (2e-4, 0.5, 0.999, 1e-8, 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![scalar(0.0)];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[scalar(1.0)], &mut s).unwrap();
        let expected = -2e-4 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-18);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_fresh_params() {
        let mut p = vec![Tensor::from_fn(&[3], |i| i as f64)];
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn refuses_bad_gradients_without_mutation() {
        let mut p = vec![scalar(1.0)];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        assert!(adam_step(&mut p, &[scalar(f64::NAN)], &mut s).is_err());
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s).is_err());
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(s.step, 0);
        assert!(sgd_step(&mut p, &[scalar(f64::INFINITY)], 0.1).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = vec![scalar(1.0)];
        sgd_step(&mut p, &[scalar(2.0)], 0.5).unwrap();
        assert_eq!(p[0].data()[0], 0.0);
        sgd_step(&mut p, &[scalar(3.0)], 0.0).unwrap();
        assert_eq!(p[0].data()[0], 0.0);
    }

    #[test]
    fn sgd_on_half_square_is_geometric() {
        let mut p = vec![scalar(1.0)];
        for _ in 0..100 {
            let g = p[0].clone();
            sgd_step(&mut p, &[g], 0.1).unwrap();
        }
        let expected = 0.9f64.powi(100);
        assert!((p[0].data()[0] - expected).abs() < 1e-15, "{}", p[0].data()[0]);
        assert!((expected - 2.656e-5).abs() < 1e-8);
    }
}
