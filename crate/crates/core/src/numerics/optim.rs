use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, Default)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW state. Moments are created lazily (as zeros) the first time a
/// parameter is updated.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    /// Clears the moment estimates of selected elements of one parameter.
    pub fn reset_elements(&mut self, name: &str, indices: &[usize]) {
        if let Some(m) = self.moments.get_mut(name) {
            for &i in indices {
                m.first[i] = 0.0;
                m.second[i] = 0.0;
            }
        }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(AdamWConfig::default())
    }
}

/// One AdamW update of every trainable parameter in `store`.
///
/// Weight decay is decoupled: `theta <- theta - lr * wd * theta` before the
/// bias-corrected Adam step. Frozen parameters are not touched.
pub fn adamw_step(store: &mut ParamStore, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    let cfg = opt.config;
    let step = opt.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let moments = &mut opt.moments;

    store.for_each_trainable_mut(|name, value, grad| {
        let grad = grad.ok_or_else(|| {
            Error::Contract(format!("missing gradient for trainable parameter `{name}`"))
        })?;
        let n = value.numel();
        let m = moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
        });
        for (i, (theta, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g as f64;
            let mut t = *theta as f64;
            t -= lr * cfg.weight_decay * t;
            m.first[i] = cfg.beta1 * m.first[i] + (1.0 - cfg.beta1) * g;
            m.second[i] = cfg.beta2 * m.second[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m.first[i] / bc1;
            let vhat = m.second[i] / bc2;
            t -= lr * mhat / (vhat.sqrt() + cfg.eps);
            *theta = t as f32;
        }
        Ok(())
    })?;
    opt.step = step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store_with(value: f32, grad: f32, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::full(&[1], value), trainable);
        s.set_grad("p", Tensor::full(&[1], grad)).unwrap();
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut store = store_with(0.0, 1.0, true);
        let mut opt = OptimizerState::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let lr = 1e-3;
        adamw_step(&mut store, &mut opt, lr).unwrap();
        let expected = (-lr * (1.0 / (1.0 + 1e-8))) as f32;
        assert_eq!(store.get("p").unwrap().item(), expected);
        assert!((store.get("p").unwrap().item() as f64 + lr / (1.0 + 1e-8)).abs() < 1e-10);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut store = store_with(0.7, 0.0, true);
        let mut opt = OptimizerState::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        adamw_step(&mut store, &mut opt, 1e-2).unwrap();
        assert_eq!(store.get("p").unwrap().item(), 0.7);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_exactly() {
        let mut store = store_with(0.7, 0.0, true);
        let mut opt = OptimizerState::new(AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        });
        let lr = 1e-2;
        adamw_step(&mut store, &mut opt, lr).unwrap();
        let theta = 0.7f32 as f64;
        assert_eq!(store.get("p").unwrap().item(), (theta - lr * 0.1 * theta) as f32);
    }

    #[test]
    fn frozen_untouched_and_missing_grad_errors() {
        let mut store = store_with(0.7, 5.0, false);
        let mut opt = OptimizerState::default();
        adamw_step(&mut store, &mut opt, 1.0).unwrap();
        assert_eq!(store.get("p").unwrap().item(), 0.7);

        let mut store = ParamStore::new();
        store.insert("q", Tensor::full(&[1], 1.0), true);
        let err = adamw_step(&mut store, &mut opt, 1.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
