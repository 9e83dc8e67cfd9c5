//! Trainable parameter storage.
//!
//! Parameters live outside any single tape: a [`Tape`](super::Tape) binds
//! them as leaves for one step, backward accumulates into `grad`, and the
//! optimizer consumes `grad` before the next step zeroes it.

use super::{Real, Tensor};
use crate::error::{Result, SefError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters. Registration order is stable and
/// is the serialization order for checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Names must be unique; they namespace groups for
    /// gradient checking (everything before the last `.`).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param name {name}"
        );
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Zero every gradient slot. Called at the start of each optimization step.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Accumulate `delta` into the gradient of `id`. Shape-checked.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != delta.shape() {
            return Err(SefError::shape(
                format!("grad accumulate for `{}`", p.name),
                p.grad.shape_str(),
                delta.shape_str(),
            ));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += *d;
        }
        Ok(())
    }

    /// Squared L2 norm of all gradients, for divergence monitoring.
    pub fn grad_norm_sq(&self) -> Real {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<Real>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_clears_all_slots() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled(2, 2, 1.0));
        store
            .accumulate_grad(id, &Tensor::filled(2, 2, 3.0))
            .unwrap();
        assert_eq!(store.get(id).grad.data(), &[3.0; 4]);
        store.zero_grads();
        assert_eq!(store.get(id).grad.data(), &[0.0; 4]);
    }

    #[test]
    fn accumulate_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(2, 2));
        assert!(store.accumulate_grad(id, &Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn lookup_by_name() {
        let mut store = ParamStore::new();
        let a = store.add("gate.w", Tensor::zeros(1, 1));
        assert_eq!(store.by_name("gate.w"), Some(a));
        assert_eq!(store.by_name("gate.b"), None);
    }
}
