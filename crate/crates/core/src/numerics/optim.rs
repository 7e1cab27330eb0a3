use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Tensor, TensorId};

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: HashMap<TensorId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, t: &Tensor) -> bool {
        self.moments.contains_key(&t.id())
    }

    /// Applies one update to every trainable tensor and zeroes its gradient.
    /// Frozen tensors are skipped and never get moment buffers.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let params: Vec<&mut Tensor> = params.into_iter().filter(|t| t.requires_grad()).collect();
        if let Some(t) = params.iter().find(|t| t.grad().is_none()) {
            return Err(Error::contract(format!(
                "trainable tensor of shape {:?} has no gradient",
                t.shape()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let grad = p.take_grad().expect("checked above");
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let data = p.data_mut();
            for k in 0..grad.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
            let mut grad = grad;
            grad.iter_mut().for_each(|x| *x = 0.0);
            p.restore_grad(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::vector(vec![0.5, -1.0]).trainable();
        w.accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step([&mut w]).unwrap();
        assert_eq!(w.data(), &[0.5, -1.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = Tensor::scalar(1.0).trainable();
        w.accumulate_grad(&[1.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step([&mut w]).unwrap();
        // t=1: mhat = g, vhat = g², step = lr·g/(|g|+eps)
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-15);
        assert_eq!(w.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut w = Tensor::scalar(1.0).trainable();
        let mut opt = Adam::new(0.1);
        assert!(matches!(opt.step([&mut w]), Err(Error::Contract(_))));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn frozen_params_get_no_moments() {
        let mut frozen = Tensor::scalar(2.0);
        let mut w = Tensor::scalar(1.0).trainable();
        w.accumulate_grad(&[0.3]).unwrap();
        let mut opt = Adam::new(0.01);
        opt.step([&mut frozen, &mut w]).unwrap();
        assert!(!opt.has_moments(&frozen));
        assert!(opt.has_moments(&w));
        assert_eq!(frozen.data(), &[2.0]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut w = Tensor::vector(vec![0.3, -0.7, 1.1]).trainable();
            let mut opt = Adam::new(0.05);
            for i in 0..10 {
                let g: Vec<f64> = w.data().iter().map(|x| 2.0 * x + i as f64 * 0.01).collect();
                w.accumulate_grad(&g).unwrap();
                opt.step([&mut w]).unwrap();
            }
            w
        };
        assert_eq!(run(), run());
    }
}
