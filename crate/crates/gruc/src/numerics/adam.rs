//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: first/second moment estimates per parameter plus the step
/// counter. Updates walk parameters in name order, so two runs fed identical
/// gradients stay bit-identical.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Rebuilds an optimizer mid-run from checkpointed state.
    pub fn restore(
        config: AdamConfig,
        step: u64,
        first: BTreeMap<String, Tensor>,
        second: BTreeMap<String, Tensor>,
    ) -> Self {
        Adam {
            config,
            step,
            first,
            second,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.first, &self.second)
    }

    /// One update over every parameter in `params`. `grads` must cover the
    /// parameter names exactly; a non-finite gradient aborts before anything
    /// is mutated, naming the offending parameter.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::domain("adam", format!("learning rate {lr}")));
        }
        for name in params.names() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing gradient for parameter `{name}`")))?;
            if g.shape() != params.get(name)?.shape() {
                return Err(Error::dimension(
                    format!("adam({name})"),
                    format!("gradient {:?} vs parameter {:?}", g.shape(), params.get(name)?.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
            }
        }
        for (name, _) in grads {
            if !params.contains(name) {
                return Err(Error::Data(format!("gradient for unknown parameter `{name}`")));
            }
        }

        self.step += 1;
        let t = self.step;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(t as i32);
        let bias2 = 1.0 - beta2.powi(t as i32);

        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let g = &grads[&name];
            let shape = g.shape().to_vec();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let m = &self.first[&name];
            let v = &self.second[&name];
            params.update_value(&name, |data| {
                for ((x, mi), vi) in data.iter_mut().zip(m.data()).zip(v.data()) {
                    let mhat = mi / bias1;
                    let vhat = vi / bias2;
                    *x -= lr * mhat / (vhat.sqrt() + epsilon);
                }
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_param(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert_constant("w", &[1], value).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With zero moments, m-hat = g and v-hat = g^2, so the step is
        // lr * g / (|g| + eps) ~= lr * sign(g).
        let mut params = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(3.7));
        adam.step(&mut params, &grads, 1e-3).unwrap();
        let w = params.get("w").unwrap().data()[0];
        assert_relative_eq!(w, 1.0 - 1e-3, max_relative = 1e-6);
    }

    #[test]
    fn nonfinite_gradient_aborts_and_names_parameter() {
        let mut params = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![f64::NAN]));
        // Construction of a NaN tensor is possible; the optimizer is the gate.
        let err = adam.step(&mut params, &grads, 1e-3).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('w'), "message should name the parameter: {msg}");
        // Nothing moved and the step counter did not advance.
        assert_eq!(params.get("w").unwrap().data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        let grads = BTreeMap::new();
        assert!(adam.step(&mut params, &grads, 1e-3).is_err());
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (w - 2)^2; gradient 2(w - 2).
        let mut params = one_param(-1.0);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..4000 {
            let w = params.get("w").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::scalar(2.0 * (w - 2.0)));
            adam.step(&mut params, &grads, 1e-2).unwrap();
        }
        let w = params.get("w").unwrap().data()[0];
        assert_relative_eq!(w, 2.0, epsilon = 1e-3);
    }
}
