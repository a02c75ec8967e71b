//! Named trainable parameters.
//!
//! A [`ParamStore`] owns every trainable tensor of a model in registration
//! order. Order is part of the public contract: the optimizer walks it
//! deterministically and checkpoints serialize it as-is.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`]; cheap to copy and stable for the lifetime of
/// the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Populated by `Tape::export_grads`, cleared by the optimizer step.
    pub grad: Option<Tensor<S>>,
    /// Whether decoupled weight decay applies (true only for matrix weights).
    pub weight_decay: bool,
}

#[derive(Debug)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a tensor under a unique name. Registration order is the
    /// iteration order everywhere else.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<S>,
        weight_decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!(
                "parameter {name:?} registered twice"
            )));
        }
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            weight_decay,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params[id.0].grad.as_ref()
    }

    /// Add a gradient contribution for one parameter (allocates on first use).
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[S]) -> Result<()> {
        let p = &mut self.params[id.0];
        if g.len() != p.value.numel() {
            return Err(Error::Contract(format!(
                "gradient for {:?} has {} elements, parameter has {}",
                p.name,
                g.len(),
                p.value.numel()
            )));
        }
        let grad = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
        for (dst, &src) in grad.data_mut().iter_mut().zip(g) {
            *dst = *dst + src;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("w", Tensor::zeros(vec![2]), true).unwrap();
        let err = store
            .register("w", Tensor::zeros(vec![2]), true)
            .unwrap_err();
        assert!(err.to_string().contains("\"w\""));
    }

    #[test]
    fn grads_accumulate_and_clear() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::zeros(vec![3]), false).unwrap();
        store.accumulate_grad(id, &[1.0, 2.0, 3.0]).unwrap();
        store.accumulate_grad(id, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(store.grad(id).unwrap().data(), &[2.0, 3.0, 4.0]);
        store.zero_grads();
        assert!(store.grad(id).is_none());
        // wrong length is a contract violation
        assert!(store.accumulate_grad(id, &[1.0]).is_err());
    }

    #[test]
    fn total_elements_sums_numels() {
        let mut store = ParamStore::<f32>::new();
        store
            .register("a", Tensor::zeros(vec![2, 3]), true)
            .unwrap();
        store.register("b", Tensor::zeros(vec![5]), false).unwrap();
        assert_eq!(store.total_elements(), 11);
    }
}
