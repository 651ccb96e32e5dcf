use std::collections::HashMap;

use super::DenseTensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    stable_id: String,
    value: DenseTensor,
    grad: DenseTensor,
    frozen: bool,
}

impl Parameter {
    pub fn stable_id(&self) -> &str {
        &self.stable_id
    }

    pub fn value(&self) -> &DenseTensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut DenseTensor {
        &mut self.value
    }

    pub fn grad(&self) -> &DenseTensor {
        &self.grad
    }

    /// Frozen parameters still pass gradients but the optimizer skips them.
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn accumulate(&mut self, g: &[f64]) {
        for (a, b) in self.grad.values_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.values_mut().fill(0.0);
    }

    /// Both the value and its gradient, for in-place optimizer updates.
    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut [f64], &[f64]) {
        (self.value.values_mut(), self.grad.values())
    }
}

/// Ordered collection of parameters addressable by stable id.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, stable_id: impl Into<String>, value: DenseTensor) -> Result<ParamId> {
        let stable_id = stable_id.into();
        if self.index.contains_key(&stable_id) {
            return Err(Error::Contract(format!(
                "duplicate parameter id `{stable_id}`"
            )));
        }
        let grad = DenseTensor::zeros(value.dims())?;
        let id = self.params.len();
        self.index.insert(stable_id.clone(), id);
        self.params.push(Parameter {
            stable_id,
            value,
            grad,
            frozen: false,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, stable_id: &str) -> Option<ParamId> {
        self.index.get(stable_id).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &DenseTensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Marks every parameter whose id starts with `prefix`; returns how many matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.stable_id.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        self.params[id.0].accumulate(g);
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.values())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
