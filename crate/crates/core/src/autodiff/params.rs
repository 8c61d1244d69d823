//! Named parameter bundles with optimizer state.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::{AdError, Tape, Tensor, Var};
use crate::math;

/// Handle to one parameter inside a [`Parameters`] bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with first/second-moment buffers for the optimizer.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Tensor,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Adam hyperparameters (bias-corrected adaptive moments).
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// An ordered bundle of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct Parameters {
    list: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

/// Tape bindings of every parameter for one forward pass, in registration
/// order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; names must be unique within the bundle.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId, AdError> {
        if self.index.contains_key(name) {
            return Err(AdError::DuplicateParameter {
                name: name.to_string(),
            });
        }
        let len = value.len();
        self.list.push(Parameter {
            name: name.to_string(),
            value,
            moment1: vec![0.0; len],
            moment2: vec![0.0; len],
        });
        self.index.insert(name.to_string(), self.list.len() - 1);
        Ok(ParamId(self.list.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.list[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.list[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.list.iter()
    }

    /// Overwrite a parameter value, keeping its optimizer state buffers.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(value.len(), self.list[id.0].value.len());
        self.list[id.0].value = value;
    }

    /// Record every parameter as a differentiable leaf on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .list
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Binding { vars }
    }

    /// Gradient of the last backward pass for every parameter, keyed by name.
    ///
    /// Parameters the output does not reach (including ones severed by
    /// stop-gradient) map to exact zeros.
    pub fn gradient_map(&self, tape: &Tape, binding: &Binding) -> BTreeMap<String, Tensor> {
        self.list
            .iter()
            .zip(&binding.vars)
            .map(|(p, &v)| (p.name.clone(), tape.grad_or_zeros(v)))
            .collect()
    }

    /// One bias-corrected adaptive-moment update. `step` counts from 1.
    pub fn adam_step(&mut self, tape: &Tape, binding: &Binding, hyper: &AdamHyper, step: u64) {
        let c1 = 1.0 - libm::pow(hyper.beta1, step as f64);
        let c2 = 1.0 - libm::pow(hyper.beta2, step as f64);
        for (param, &var) in self.list.iter_mut().zip(&binding.vars) {
            let grad = tape.grad_or_zeros(var);
            let g = grad.data();
            let values = param.value.data_mut();
            for i in 0..values.len() {
                param.moment1[i] = hyper.beta1 * param.moment1[i] + (1.0 - hyper.beta1) * g[i];
                param.moment2[i] =
                    hyper.beta2 * param.moment2[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                let m_hat = param.moment1[i] / c1;
                let v_hat = param.moment2[i] / c2;
                values[i] -= hyper.learning_rate * m_hat / (math::sqrt(v_hat) + hyper.epsilon);
            }
        }
    }

    // ---- flat coordinate view (finite differences, checkpoints) ----

    pub fn coordinate_count(&self) -> usize {
        self.list.iter().map(|p| p.value.len()).sum()
    }

    fn locate(&self, coord: usize) -> (usize, usize) {
        let mut offset = coord;
        for (pi, p) in self.list.iter().enumerate() {
            if offset < p.value.len() {
                return (pi, offset);
            }
            offset -= p.value.len();
        }
        panic!("coordinate {coord} out of range");
    }

    pub fn coordinate(&self, coord: usize) -> f64 {
        let (pi, off) = self.locate(coord);
        self.list[pi].value.data()[off]
    }

    pub fn set_coordinate(&mut self, coord: usize, value: f64) {
        let (pi, off) = self.locate(coord);
        self.list[pi].value.data_mut()[off] = value;
    }

    pub fn coordinate_name(&self, coord: usize) -> (String, usize) {
        let (pi, off) = self.locate(coord);
        (self.list[pi].name.clone(), off)
    }
}
