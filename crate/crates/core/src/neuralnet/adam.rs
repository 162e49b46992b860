use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradMap, NetError, Parameters};
use crate::ndgrad::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: default_eps(),
        }
    }
}

/// Bias-corrected Adam with per-parameter moments keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter in `params`.
    ///
    /// All gradients are validated before any parameter changes, so a
    /// missing or misshapen gradient leaves the model untouched.
    pub fn step(&mut self, params: &mut dyn Parameters, grads: &GradMap) -> Result<(), NetError> {
        let current = params.parameters();
        for (name, p) in &current {
            let g = grads.get(name).ok_or_else(|| NetError::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(NetError::ParamShape {
                    name: name.clone(),
                    expected: p.shape(),
                    got: g.shape(),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in current {
            let g = grads[&name].data();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let u = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut next = p.to_vec();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                u[i] = beta2 * u[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let u_hat = u[i] / bc2;
                next[i] -= lr * m_hat / (u_hat.sqrt() + eps);
            }
            params.set_parameter(&name, Matrix::new(p.shape(), next)?)?;
        }
        Ok(())
    }

    /// Moments as named tensors, for checkpointing.
    pub fn export(&self, shapes: &BTreeMap<String, [usize; 2]>) -> Result<Vec<(String, Matrix)>, NetError> {
        let mut out = Vec::new();
        for (kind, map) in [("m", &self.first), ("u", &self.second)] {
            for (name, values) in map {
                let shape = *shapes
                    .get(name)
                    .ok_or_else(|| NetError::UnknownParameter(name.clone()))?;
                out.push((format!("{kind}.{name}"), Matrix::new(shape, values.clone())?));
            }
        }
        Ok(out)
    }

    /// Rebuilds a state from [`export`](Self::export)ed tensors.
    pub fn restore(config: AdamConfig, t: u64, tensors: &[(String, Matrix)]) -> Result<Self, NetError> {
        let mut state = Self::new(config);
        state.t = t;
        for (key, m) in tensors {
            let (kind, name) = key
                .split_once('.')
                .ok_or_else(|| NetError::Checkpoint(format!("bad optimizer tensor name {key}")))?;
            let map = match kind {
                "m" => &mut state.first,
                "u" => &mut state.second,
                _ => return Err(NetError::Checkpoint(format!("bad optimizer tensor name {key}"))),
            };
            map.insert(name.to_string(), m.to_vec());
        }
        Ok(state)
    }
}
