use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 2e-4, beta1: 0.9, beta2: 0.98, epsilon: 1e-6, weight_decay: 0.05 }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    /// Updates applied to this parameter; drives bias correction, so a
    /// parameter unfrozen late starts with a fresh correction.
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    updates: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, updates: 0, state: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.config.learning_rate = lr;
    }

    /// Number of `step` calls that updated at least one parameter.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn restore(config: AdamConfig, updates: u64, state: BTreeMap<String, Moments>) -> Self {
        Adam { config, updates, state }
    }

    /// Applies one update to every trainable tensor and clears its gradient.
    ///
    /// Tensors with `requires_grad == false` are skipped without being read or
    /// written. A trainable tensor without a gradient is an error, reported
    /// before anything is modified.
    pub fn step<'a, I, S>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (S, &'a mut Tensor)>,
        S: Into<String>,
    {
        let trainable: Vec<(String, &'a mut Tensor)> = params
            .into_iter()
            .map(|(name, t)| (name.into(), t))
            .filter(|(_, t)| t.requires_grad())
            .collect();
        if let Some((name, _)) = trainable.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(TensorError::MissingGrad(name.clone()));
        }
        if trainable.is_empty() {
            return Ok(());
        }
        self.updates += 1;
        let AdamConfig { learning_rate: lr, beta1, beta2, epsilon, weight_decay } = self.config;
        for (name, tensor) in trainable {
            let grad = tensor.grad().expect("checked above").to_vec();
            let n = grad.len();
            let moments = self.state.entry(name).or_insert_with(|| Moments { step: 0, m: vec![0.0; n], v: vec![0.0; n] });
            if moments.m.len() != n {
                return Err(TensorError::InvalidArgument(format!(
                    "optimizer state holds {} values but the parameter has {n}",
                    moments.m.len()
                )));
            }
            moments.step += 1;
            let bc1 = 1.0 - beta1.powi(moments.step as i32);
            let bc2 = 1.0 - beta2.powi(moments.step as i32);
            let decay = 1.0 - lr * weight_decay;
            for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(&mut moments.m).zip(&mut moments.v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
