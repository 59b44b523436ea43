use std::collections::HashMap;
use std::rc::Rc;

use super::real::Real;
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Receives gradients and optimizer updates.
    Trainable,
    /// Non-differentiable state such as batch-norm running statistics.
    Buffer,
}

/// A named tensor owned by a model. Trainable entries carry the gradient
/// slot populated by [`ParamStore::load_grads`].
#[derive(Clone, Debug)]
pub struct Param<T> {
    name: String,
    kind: ParamKind,
    value: Rc<Tensor<T>>,
    grad: Option<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn requires_grad(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            value: Rc::new(value),
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Tensor<T>> {
        Rc::clone(&self.params[id.0].value)
    }

    /// Mutable access; copies the tensor first if a live tape still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Rc::new(value);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.requires_grad())
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies gradients from a backward pass into each trainable parameter's
    /// slot. Parameters the loss does not reach get an all-zero gradient.
    pub fn load_grads(&mut self, grads: &Gradients<T>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            p.grad = Some(match grads.param(ParamId(i)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.shape()),
            });
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Rc::new(p.value.cast()),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[2]), ParamKind::Trainable).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2]), ParamKind::Buffer).is_err());
        assert_eq!(s.id("a"), Some(ParamId(0)));
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::zeros(&[2, 2]), ParamKind::Trainable).unwrap();
        assert!(s.set(id, Tensor::zeros(&[4])).is_err());
        s.set(id, Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(s.get(id).sum(), 4.0);
    }
}
