//! Named parameter storage shared across forward passes.
//!
//! Parameters persist in a [`ParamStore`]; each training step binds them onto
//! a fresh [`Tape`] as leaves. Modules keep [`ParamId`]s and look their tape
//! handles up through the per-step [`Bindings`], so two modules holding the
//! same id literally share one parameter.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter under a unique name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor.with_requires_grad())
    }

    /// Registers a non-trainable buffer (e.g. running statistics): it is
    /// checkpointed alongside parameters but never receives gradients.
    pub fn add_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.requires_grad = false;
        self.push(name.into(), tensor)
    }

    fn push(&mut self, name: String, tensor: Tensor) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter name: {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every parameter onto the tape, in registration order.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings { vars: self.tensors.iter().map(|t| tape.leaf(t)).collect() }
    }

    /// Pulls gradients off a swept tape back into `grad` buffers.
    pub fn collect_grads(&mut self, tape: &Tape, binds: &Bindings) -> Result<()> {
        for (i, tensor) in self.tensors.iter_mut().enumerate() {
            tensor.grad = tape.grad(binds.vars[i]).map(<[f64]>::to_vec);
        }
        Ok(())
    }
}

/// Tape handles for every parameter of one forward pass.
#[derive(Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_id_means_shared_gradient_accumulation() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let v = binds.var(p);
        // use the same parameter twice: loss = sum(w) + sum(w)
        let s1 = tape.sum_all(v).unwrap();
        let s2 = tape.sum_all(v).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        store.collect_grads(&tape, &binds).unwrap();
        assert_eq!(store.get(p).grad.as_deref().unwrap(), &[2.0, 2.0]);
    }
}
