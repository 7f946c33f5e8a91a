use super::Tensor;
use crate::{Error, Result};
use std::collections::HashMap;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient, frozen flag and the snapshot of
/// its value taken when the owning model was constructed.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
    initial: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            initial: value.clone(),
            value,
            grad,
            frozen: false,
        }
    }

    /// Rebuilds a parameter whose value has drifted from its snapshot, as
    /// stored in a checkpoint.
    pub fn restore(
        name: impl Into<String>,
        value: Tensor,
        initial: Tensor,
        frozen: bool,
    ) -> Result<Self> {
        let name = name.into();
        if value.shape() != initial.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter restore",
                lhs: value.shape().to_vec(),
                rhs: initial.shape().to_vec(),
            });
        }
        let grad = Tensor::zeros(value.shape());
        Ok(Parameter {
            name,
            value,
            grad,
            initial,
            frozen,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn initial(&self) -> &Tensor {
        &self.initial
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn set_value(&mut self, values: &[f64]) -> Result<()> {
        self.value.assign(values)
    }

    pub(crate) fn value_mut(&mut self) -> &mut [f64] {
        self.value.data_mut()
    }

    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut [f64], &[f64]) {
        (self.value.data_mut(), self.grad.data())
    }

    pub(crate) fn accumulate_grad(&mut self, g: &Tensor) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// True when the current value is bit-identical to the snapshot.
    pub fn matches_initial(&self) -> bool {
        self.value.bit_eq(&self.initial)
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, param: Parameter) -> Result<ParamId> {
        if self.by_name.contains_key(param.name()) {
            return Err(Error::Invalid(format!(
                "duplicate parameter {}",
                param.name()
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name().to_string(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    /// Current values in store order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value().clone()).collect()
    }

    /// Overwrites every value; shapes must line up with the store.
    pub fn load_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load values",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

/// Anything that owns a [`ParamStore`].
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}
