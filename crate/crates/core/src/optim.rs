use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Moment estimates for every parameter in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |p: &crate::autograd::Parameter| Tensor::zeros(p.value.shape());
        Self {
            config,
            step: 0,
            first: params.params().iter().map(zeros).collect(),
            second: params.params().iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected Adam update using the gradients held in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, state for {}", params.len(), self.first.len()),
            ));
        }
        for (p, m) in params.params().iter().zip(&self.first) {
            if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params
            .params_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let grad = p.grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value));
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut s = single(1.5, 0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        st.step(&mut s).unwrap();
        assert_eq!(s.params()[0].value.data(), &[1.5]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = single(0.0, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&s, cfg);
        st.step(&mut s).unwrap();
        // m̂ = 1, v̂ = 1 -> Δ = -0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.params()[0].value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn identical_state_gives_identical_result() {
        let mut a = single(0.3, -0.7);
        let mut b = a.clone();
        let mut sa = AdamState::new(&a, AdamConfig::default());
        let mut sb = sa.clone();
        sa.step(&mut a).unwrap();
        sb.step(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let s = single(0.0, 0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut other = ParamStore::new();
        other.add("a", Tensor::scalar(0.0));
        other.add("b", Tensor::scalar(0.0));
        assert!(st.step(&mut other).is_err());
    }
}
