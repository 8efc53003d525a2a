use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One named tensor of a layer together with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Present exactly when the tensor is trainable.
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn trainable(value: Tensor) -> Self {
        let grad = Some(Tensor::zeros(value.shape()));
        Self { value, grad }
    }

    pub fn frozen(value: Tensor) -> Self {
        Self { value, grad: None }
    }

    pub fn is_trainable(&self) -> bool {
        self.grad.is_some()
    }
}

/// Named parameter tensors of a single layer, keyed by role
/// (`weight`, `bias`, `gamma`, `running_mean`, `W_i`, `U_f`, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub name: String,
    pub tensors: BTreeMap<String, Param>,
}

impl LayerParams {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_trainable(mut self, role: &str, value: Tensor) -> Self {
        self.tensors.insert(role.to_owned(), Param::trainable(value));
        self
    }

    pub fn with_frozen(mut self, role: &str, value: Tensor) -> Self {
        self.tensors.insert(role.to_owned(), Param::frozen(value));
        self
    }

    pub fn get(&self, role: &str) -> Result<&Tensor> {
        self.tensors
            .get(role)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Parameter(format!("layer {:?} has no {role:?}", self.name)))
    }

    pub fn get_mut(&mut self, role: &str) -> Result<&mut Tensor> {
        let name = &self.name;
        self.tensors
            .get_mut(role)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Parameter(format!("layer {name:?} has no {role:?}")))
    }

    /// Adds `delta` into the gradient slot of a trainable tensor.
    pub fn accumulate_grad(&mut self, role: &str, delta: &Tensor) -> Result<()> {
        let p = self
            .tensors
            .get_mut(role)
            .ok_or_else(|| Error::Parameter(format!("no parameter {role:?}")))?;
        match p.grad.as_mut() {
            Some(g) => g.add_assign(delta),
            None => Err(Error::State(format!("{role:?} is not trainable"))),
        }
    }

    pub fn grad(&self, role: &str) -> Option<&Tensor> {
        self.tensors.get(role).and_then(|p| p.grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for p in self.tensors.values_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .values()
            .filter(|p| p.is_trainable())
            .map(|p| p.value.len())
            .sum()
    }
}
