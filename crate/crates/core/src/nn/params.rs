use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of tensors owned by a model.
///
/// Models keep [`ParamId`]s into a store rather than tensors, so optimizers,
/// checkpoints and moving averages all walk the same flat list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a tape leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Gradients for previously bound leaves; zeros where none flowed.
    pub fn grads(&self, tape: &Tape<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!("{} vs {} parameters", self.len(), other.len())));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Shape(format!("parameter {na}{:?} vs {nb}{:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }

    /// Replaces the tensors with `loaded`, which must share the layout.
    pub fn load_from(&mut self, loaded: ParamStore<T>) -> Result<()> {
        self.check_same_layout(&loaded)?;
        self.tensors = loaded.tensors;
        Ok(())
    }

    /// Appends every entry of `other` with `prefix` on its name.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (n, t) in other.iter() {
            self.add(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Entries whose name starts with `prefix`, prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.add(rest, t.clone());
            }
        }
        out
    }
}
