use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named trainable buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Parameter(format!("duplicate parameter name `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(TensorError::Dimension(format!("parameter `{name}`: shape {shape:?} vs {} values", data.len())));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, shape: shape.to_vec(), data });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Same parameters at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces values in place; names and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Parameter(format!("expected {} parameters, found {}", self.len(), other.len())));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(TensorError::Parameter(format!(
                    "parameter mismatch: `{}` {:?} vs `{}` {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }
}

/// Per-forward-pass view of a store: hands out leaf tensors lazily and
/// collects their gradients afterwards. Parameters outside the trainable
/// mask become constants, so no gradient reaches them.
pub struct Binding<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    trainable: Vec<bool>,
    leaves: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<'a, T: Scalar> Binding<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: impl Fn(&Parameter<T>) -> bool) -> Self {
        Binding {
            store,
            trainable: store.params.iter().map(trainable).collect(),
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self::new(store, |_| true)
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::new(store, |_| false)
    }

    pub fn get(&self, id: ParamId) -> Tensor<T> {
        let mut leaves = self.leaves.borrow_mut();
        leaves[id.0]
            .get_or_insert_with(|| {
                let p = &self.store.params[id.0];
                let make = if self.trainable[id.0] { Tensor::leaf } else { Tensor::new };
                make(p.data.clone(), &p.shape).expect("store validated the shape")
            })
            .clone()
    }

    /// Gradient per parameter, in store order; `None` for untouched or frozen ones.
    pub fn grads(&self) -> Vec<Option<Vec<T>>> {
        self.leaves
            .borrow()
            .iter()
            .map(|leaf| leaf.as_ref().and_then(Tensor::grad))
            .collect()
    }
}
