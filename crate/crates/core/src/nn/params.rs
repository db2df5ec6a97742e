use std::collections::BTreeMap;
use std::ops::Index;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order, addressed by `module.param`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

/// Tape leaves for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad(false));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape`; `trainable` controls whether the
    /// leaves collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect();
        Bound { vars }
    }

    /// Gradients collected for `bound` after backward, zero-filled where the
    /// loss did not reach a parameter.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        self.tensors.iter().zip(&bound.vars).map(|(t, &v)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)).collect()
    }

    /// Named copies under `prefix.`, for checkpoint containers.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (format!("{prefix}.{n}"), t.clone())).collect()
    }

    /// Overwrites every parameter from `entries` (looked up as `prefix.name`).
    /// Missing names or shape changes are errors.
    pub fn load_named(&mut self, prefix: &str, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}.{name}");
            let src = entries.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{key}: shape {:?} in checkpoint, model expects {:?}", src.shape(), t.shape())));
            }
            t.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }

    /// Bitwise equality of all parameter values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}
