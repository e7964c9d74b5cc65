//! Adam optimizer with bias correction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// A named trainable tensor. The name shows up in diagnostics when a
/// gradient goes non-finite.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value: value.with_grad() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(lr: f32) -> Self {
        AdamConfig { learning_rate: lr, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if b.is_nan() || b <= 0.0 || b >= 1.0 {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    beta1_pow: f32,
    beta2_pow: f32,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState { config, m: Vec::new(), v: Vec::new(), step: 0, beta1_pow: 1.0, beta2_pow: 1.0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all parameters, consuming their gradients.
    ///
    /// Every parameter must carry a gradient; a non-finite gradient aborts
    /// with the offending parameter named.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| alloc::vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        self.beta1_pow *= self.config.beta1;
        self.beta2_pow *= self.config.beta2;
        let bc1 = 1.0 - self.beta1_pow;
        let bc2 = 1.0 - self.beta2_pow;
        let AdamConfig { learning_rate: lr, beta1, beta2, epsilon } = self.config;

        for (pi, p) in params.iter_mut().enumerate() {
            let n = p.value.numel();
            if self.m[pi].len() != n {
                return Err(Error::InvalidArgument(format!(
                    "moment buffer for {} has {} entries, parameter has {n}",
                    p.name,
                    self.m[pi].len()
                )));
            }
            let grad = p
                .value
                .grad()
                .ok_or_else(|| Error::InvalidArgument(format!("parameter {} has no gradient", p.name)))?
                .to_vec();
            if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {} contains {bad}",
                    p.name
                )));
            }
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            let data = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (fmath::sqrt(v_hat) + epsilon);
            }
        }
        Ok(())
    }
}
