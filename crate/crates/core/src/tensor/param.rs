use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named weight with its gradient accumulator.
///
/// Buffers (batch-norm running statistics) live here too so that one
/// checkpoint captures everything a layer needs; they never receive
/// gradient updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub buffer: bool,
    pub frozen: bool,
}

impl Parameter {
    fn new(name: String, value: Tensor, buffer: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name,
            value,
            grad,
            buffer,
            frozen: false,
        }
    }

    pub fn trainable(&self) -> bool {
        !self.buffer && !self.frozen
    }
}

/// Ordered collection of parameters, addressable by id or name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, buffer: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Construction(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter::new(name.to_string(), value, buffer));
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Marks every parameter whose name starts with `prefix` as frozen (or not).
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// Copies values from `other` for every name it shares with `self`.
    ///
    /// Every parameter in `other` must exist here with the same shape.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<usize> {
        for (name, value) in other {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Load(format!("checkpoint parameter {name} not in model")))?;
            let current = &self.params[id.0].value;
            if current.shape() != value.shape() {
                return Err(Error::Load(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    current.shape()
                )));
            }
        }
        for (name, value) in other {
            let id = self.by_name[name];
            self.params[id.0].value = value.clone();
        }
        Ok(other.len())
    }

    /// Moves every parameter of `other` into `self`, keeping flags.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for p in other.params {
            let id = self.insert(&p.name, p.value, p.buffer)?;
            self.params[id.0].frozen = p.frozen;
        }
        Ok(())
    }

    /// `(name, value)` pairs for parameters whose name starts with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_matches_value_shape_and_resets_to_zero() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled(&[2, 3], 1.5)).unwrap();
        assert_eq!(store.grad(id).shape(), &[2, 3]);
        store.grad_mut(id).fill(4.0);
        store.zero_grads();
        assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros(&[1])),
            Err(Error::Construction(_))
        ));
    }

    #[test]
    fn load_from_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        let err = store
            .load_from(&[("w".to_string(), Tensor::zeros(&[3]))])
            .unwrap_err();
        assert!(matches!(err, Error::Load(_)));
        let err = store
            .load_from(&[("v".to_string(), Tensor::zeros(&[2]))])
            .unwrap_err();
        assert!(matches!(err, Error::Load(_)));
    }
}
