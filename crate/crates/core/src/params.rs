//! Named trainable parameters.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Parameter tensors keyed by module path (e.g. `lstm.question.l0.w`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a tensor under `name`, replacing any previous value.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor<T>) -> ParamId {
        tensor.set_requires_grad(true);
        if let Some(&id) = self.index.get(name) {
            self.tensors[id.0] = tensor;
            return id;
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    /// Registers a tensor drawn from `uniform(-scale, scale)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.gen_range(-scale..scale)))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Parameters in name order.
    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.index
            .iter()
            .map(|(name, id)| (name.as_str(), &self.tensors[id.0]))
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
