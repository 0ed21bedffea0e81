//! Named parameter tensors with per-parameter gradient accumulators.

use std::collections::HashMap;

use super::tensor::Tensor;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Dense index in store insertion order.
    pub fn index(self) -> usize {
        self.0
    }

    /// Rebuild from a dense index (callers must keep it in range).
    pub fn from_index(index: usize) -> Self {
        ParamId(index)
    }
}

/// Learning-rate group a parameter belongs to; the trainer maps groups to
/// rates (and uses a zero rate to freeze a group).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Decoder,
    PixelEmbed,
}

#[derive(Clone)]
struct Param {
    name: String,
    group: ParamGroup,
    value: Tensor,
    grad: Tensor,
}

/// Insertion-ordered collection of named parameters and their gradients.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_in_group(name, value, ParamGroup::Backbone)
    }

    pub fn add_in_group(&mut self, name: &str, value: Tensor, group: ParamGroup) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Param { name: name.to_string(), group, value, grad });
        let id = ParamId(self.params.len() - 1);
        self.by_name.insert(name.to_string(), id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
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

    /// Add `g` into the gradient accumulator of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let target = &mut self.params[id.0].grad;
        debug_assert!(target.same_shape(g), "gradient shape mismatch");
        for (x, y) in target.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }

    /// Reset every gradient accumulator to exactly zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
