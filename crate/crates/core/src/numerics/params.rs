use std::collections::HashMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors with gradient buffers of identical shape.
///
/// Iteration order is insertion order, which makes checkpoints and
/// optimizer state layout deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            frozen: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.frozen.push(false);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    /// Frozen parameters never receive gradient.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
            frozen: self.frozen.clone(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copy values from `other` by name; shapes must agree.
    pub fn load_from<U: Real>(&mut self, other: &[(String, Tensor<U>)]) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, value) in other {
            let id = self
                .id(name)
                .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::config(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                )));
            }
            self.values[id.0] = value.cast();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!(
                "parameter `{}` missing from checkpoint",
                self.names[missing]
            )));
        }
        Ok(())
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_clears_every_buffer() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::full(&[2, 2], 1.0));
        let b = store.add("b", Tensor::full(&[3], 1.0));
        store.grad_mut(a).fill(2.0);
        store.grad_mut(b).fill(-1.0);
        store.zero_grad();
        assert!(store.grad(a).data().iter().all(|&g| g == 0.0));
        assert!(store.grad(b).data().iter().all(|&g| g == 0.0));
        assert_eq!(store.grad(a).shape(), store.value(a).shape());
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let bad = vec![("w".to_string(), Tensor::<f32>::zeros(&[2, 3]))];
        assert!(store.load_from(&bad).is_err());
    }
}
