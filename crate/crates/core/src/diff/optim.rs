use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub config: AdamConfig,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            first: (0..params.len()).map(|i| vec![T::ZERO; params.tensor(i).len()]).collect(),
            second: (0..params.len()).map(|i| vec![T::ZERO; params.tensor(i).len()]).collect(),
            step: 0,
        }
    }

    /// Applies one Adam update to every trainable parameter, then zeroes
    /// the gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<(), DiffError> {
        for i in 0..params.len() {
            let t = params.tensor(i);
            if t.requires_grad() && t.grad().is_none() {
                return Err(DiffError::MissingGrad(params.name(i).to_string()));
            }
            if self.first[i].len() != t.len() {
                return Err(DiffError::Shape(format!(
                    "optimizer moments for {} do not match parameter shape",
                    params.name(i)
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (lr, eps) = (T::from_f64(c.learning_rate), T::from_f64(c.eps));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        for i in 0..params.len() {
            let tensor = params.tensor_mut(i);
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                let mh = m[j] * inv_bc1;
                let vh = v[j] * inv_bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Tape, Tensor};

    fn single(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_f64([1], &[v]).unwrap().with_grad());
        p
    }

    #[test]
    fn degenerate_moments_give_sign_step() {
        let mut p = single(1.0);
        p.tensor_mut(0).accumulate_grad(&[0.3]).unwrap();
        let cfg = AdamConfig {
            learning_rate: 0.01,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let mut opt = OptimizerState::new(cfg, &p);
        opt.step(&mut p).unwrap();
        let expected = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((p.tensor(0).data()[0] - expected).abs() < 1e-15);
        assert!((p.tensor(0).data()[0] - 0.99).abs() < 1e-9);
        assert_eq!(p.tensor(0).grad().unwrap(), &[0.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = single(2.5);
        p.tensor_mut(0).accumulate_grad(&[0.0]).unwrap();
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        opt.step(&mut p).unwrap();
        assert_eq!(p.tensor(0).data()[0], 2.5);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = single(1.0);
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        assert!(matches!(opt.step(&mut p), Err(DiffError::MissingGrad(_))));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x, y) = (x - 0.5)^2 + 2 (y + 0.3)^2, minimum within Adam's
        // ~lr-per-step travel budget from the origin.
        let mut p = ParamStore::<f64>::new();
        p.insert("xy", Tensor::from_f64([2], &[0.0, 0.0]).unwrap().with_grad());
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &p);
        let target = Tensor::from_f64([2], &[0.5, -0.3]).unwrap();
        let weight = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let x = tape.param(&p, 0);
            let t = tape.constant(target.clone());
            let w = tape.constant(weight.clone());
            let d = tape.sub(x, t).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let wsq = tape.mul(sq, w).unwrap();
            let loss = tape.sum(wsq).unwrap();
            tape.backward(loss).unwrap();
            tape.accumulate_into(&mut p).unwrap();
            opt.step(&mut p).unwrap();
        }
        let xy = p.tensor(0).data();
        assert!((xy[0] - 0.5).abs() < 1e-3, "{xy:?}");
        assert!((xy[1] + 0.3).abs() < 1e-3, "{xy:?}");
    }
}
