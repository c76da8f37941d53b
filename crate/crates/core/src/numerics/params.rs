use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{KvecError, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// Gradient buffers aligned with a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    index: HashMap<String, ParamId>,
    adam: AdamConfig,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}

impl ParameterStore {
    pub fn new(adam: AdamConfig) -> Self {
        ParameterStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
            index: HashMap::new(),
            adam,
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.first.push(vec![0.0; value.len()]);
        self.second.push(vec![0.0; value.len()]);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.first[id.0], &self.second[id.0])
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn adam_config(&self) -> AdamConfig {
        self.adam
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Fresh zeroed buffers with this store's shapes.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self.values.iter().map(|v| Tensor::zeros(v.rows(), v.cols())).collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&grads.tensors) {
            a.add_assign(b);
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// One Adam update with bias correction over every parameter, then zeroes
    /// the gradients. A non-finite gradient aborts the whole step untouched.
    pub fn adam_step(&mut self, learning_rate: f64) -> Result<()> {
        if let Some(bad) = self.grads.iter().position(|g| !g.is_finite()) {
            return Err(KvecError::NonFiniteGradient(self.names[bad].clone()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.adam;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for p in 0..self.values.len() {
            let values = self.values[p].data_mut();
            let grads = self.grads[p].data();
            let (m, v) = (&mut self.first[p], &mut self.second[p]);
            for k in 0..values.len() {
                let g = grads[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                values[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Copies parameter values (not optimizer state) from another store with
    /// identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (id, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .ok_or_else(|| KvecError::Checkpoint(format!("missing parameter `{name}`")))?;
            let src = other.value(src);
            if src.shape() != self.values[id].shape() {
                return Err(KvecError::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            self.values[id] = src.clone();
        }
        Ok(())
    }
}
