//! Named learnable tensors and the store that owns them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a tensor belongs to. Buffers (running statistics) are
/// never touched by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Offset,
    Buffer,
}

impl ParamRole {
    pub fn code(self) -> u8 {
        match self {
            ParamRole::Weight => 0,
            ParamRole::Offset => 1,
            ParamRole::Buffer => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamRole::Weight),
            1 => Some(ParamRole::Offset),
            2 => Some(ParamRole::Buffer),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    pub requires_grad: bool,
    pub role: ParamRole,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>, role: ParamRole) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let n = values.len();
        Self {
            name: name.into(),
            shape,
            values,
            grad: vec![T::zero(); n],
            requires_grad: role != ParamRole::Buffer,
            role,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn is_trainable(&self) -> bool {
        self.role != ParamRole::Buffer
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a tensor; each name has exactly one owner.
    pub fn insert(&mut self, param: ParamTensor<T>) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Config(format!(
                "parameter slot `{}` registered twice",
                param.name
            )));
        }
        let id = ParamId(self.params.len());
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter slot `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.params[id.0].values
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamTensor<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.zero_grad());
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.is_trainable())
            .map(|p| p.numel())
            .sum()
    }

    /// Adds tape gradients into the stored gradient slots of every tensor
    /// that requires a gradient.
    pub fn accumulate(&mut self, grads: &crate::autodiff::Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.requires_grad {
                continue;
            }
            for (a, &b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// Writes buffer values (e.g. running statistics) produced by a
    /// training-mode forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, v) in updates {
            self.params[id.0].values = v;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|&v| U::c(v.to_f64())).collect(),
                    grad: p.grad.iter().map(|&v| U::c(v.to_f64())).collect(),
                    requires_grad: p.requires_grad,
                    role: p.role,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
