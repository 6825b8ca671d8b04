use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// Moment buffers for every parameter of one [`ParamStore`], in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros = |_| Vec::new();
        let mut state = Self {
            config,
            step_count: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        };
        for (id, p) in store.iter() {
            state.m[id.index()] = vec![0.0; p.tensor.len()];
            state.v[id.index()] = vec![0.0; p.tensor.len()];
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update over every trainable parameter.
///
/// Gradients are left in place; the caller zeroes them before the next step.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (_, p) in store.iter() {
        if p.tensor.requires_grad() && p.tensor.grad().is_none() {
            return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
        }
    }
    state.step_count += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (id, p) in store.iter_mut() {
        if !p.tensor.requires_grad() {
            continue;
        }
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[k] as f64;
            let mk = beta1 * m[k] as f64 + (1.0 - beta1) * g;
            let vk = beta2 * v[k] as f64 + (1.0 - beta2) * g * g;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(value: f32, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![1], vec![value]).unwrap());
        store.get_mut(id).accumulate_grad(&[grad]);
        store
    }

    #[test]
    fn zero_grad_on_fresh_state_leaves_params() {
        let mut store = scalar_store(0.7, 0.0);
        let mut state = AdamState::new(&store, AdamConfig::default()).unwrap();
        adam_step(&mut store, &mut state).unwrap();
        assert_eq!(store.get(crate::autodiff::ParamId(0)).data(), &[0.7]);
        assert_eq!((state.m[0][0], state.v[0][0]), (0.0, 0.0));
    }

    #[test]
    fn zero_grad_decays_moments() {
        // Accumulated momentum still moves the parameter; only the moments decay.
        let mut store = scalar_store(0.7, 0.0);
        let mut state = AdamState::new(&store, AdamConfig::default()).unwrap();
        state.m[0][0] = 1.0;
        state.v[0][0] = 1.0;
        adam_step(&mut store, &mut state).unwrap();
        assert!((state.m[0][0] - 0.9).abs() < 1e-7);
        assert!((state.v[0][0] - 0.999).abs() < 1e-7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0, 1.0);
        let mut state = AdamState::new(&store, AdamConfig::default()).unwrap();
        adam_step(&mut store, &mut state).unwrap();
        let p = store.get(crate::autodiff::ParamId(0)).data()[0] as f64;
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-7, "{p} vs {expected}");
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn second_identical_step_is_not_larger() {
        let mut store = scalar_store(1.0, 1.0);
        let mut state = AdamState::new(&store, AdamConfig::default()).unwrap();
        adam_step(&mut store, &mut state).unwrap();
        let p1 = store.get(crate::autodiff::ParamId(0)).data()[0] as f64;
        adam_step(&mut store, &mut state).unwrap();
        let p2 = store.get(crate::autodiff::ParamId(0)).data()[0] as f64;
        assert_eq!(state.step_count, 2);
        assert!((p1 - p2).abs() <= (1.0 - p1) + 1e-6);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut store = ParamStore::new();
        store.add("encoder.w", Tensor::zeros(&[2]));
        let mut state = AdamState::new(&store, AdamConfig::default()).unwrap();
        let err = adam_step(&mut store, &mut state).unwrap_err().to_string();
        assert!(err.contains("encoder.w"), "{err}");
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let store = ParamStore::new();
        let bad = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(&store, bad).is_err());
    }
}
