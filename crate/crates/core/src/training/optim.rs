use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: `θ ← θ - lr·decay·θ`, applied outside the moments.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in `store` from its accumulated gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step_only(store, None)
    }

    /// Like [`Adam::step`], restricted to `ids` when given.
    pub fn step_only(&mut self, store: &mut ParamStore<T>, ids: Option<&[ParamId]>) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(index) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                    index,
                });
            }
        }
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let decay = T::lit(c.lr * c.weight_decay);
        let eps = T::lit(c.eps);
        let selected: Option<Vec<bool>> = ids.map(|ids| {
            let mut mask = vec![false; store.len()];
            for id in ids {
                mask[id.index()] = true;
            }
            mask
        });
        for (i, p) in store.iter_mut().enumerate() {
            if selected.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let grads = p.grad.data();
            for (k, theta) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                *theta = *theta - decay * *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut s = store(0.7, 0.0);
        let mut adam = Adam::new(AdamConfig::new(1e-3, 0.0));
        adam.step(&mut s).unwrap();
        assert_eq!(s.value(ParamId(0)).item(), 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(0.0, 0.5);
        let mut adam = Adam::new(AdamConfig::new(1e-5, 0.0));
        adam.step(&mut s).unwrap();
        let expected = -1e-5 * (0.5 / (0.5 + 1e-8));
        assert_abs_diff_eq!(s.value(ParamId(0)).item(), expected, epsilon = 1e-18);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut s = store(2.0, 0.0);
        let mut adam = Adam::new(AdamConfig::new(1e-3, 0.01));
        adam.step(&mut s).unwrap();
        assert_abs_diff_eq!(s.value(ParamId(0)).item(), 2.0 - 1e-3 * 0.01 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(1.0, f64::NAN);
        let mut adam = Adam::new(AdamConfig::new(1e-3, 0.0));
        match adam.step(&mut s) {
            Err(Error::NonFiniteGradient { name, index }) => {
                assert_eq!(name, "theta");
                assert_eq!(index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.value(ParamId(0)).item(), 1.0);
        assert_eq!(adam.steps(), 0);
    }
}
