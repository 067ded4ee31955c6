use serde::{Deserialize, Serialize};

use crate::{Error, Params, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &Params<T>) -> Self {
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape());
        Self {
            config,
            step: 0,
            first: params.tensors().iter().map(zeros).collect(),
            second: params.tensors().iter().map(zeros).collect(),
        }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&self.first)) {
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("`{name}`: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { name: name.to_string() });
            }
        }

        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let correct1 = T::one() - T::from_f64(c.beta1.powi(self.step as i32));
        let correct2 = T::one() - T::from_f64(c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));

        for (k, g) in grads.iter().enumerate() {
            let p = params.get_mut(k).data_mut();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> Params<f64> {
        let mut p = Params::new();
        p.push("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = single(0.3);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..5 {
            adam.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.get(0).item(), 0.3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        adam.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        assert!((p.get(0).item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        let err = adam.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref name } if name == "w"));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(p.get(0).item(), 1.0);
    }
}
