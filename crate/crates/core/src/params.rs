use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Name-addressable collection of learnable tensors.
///
/// Insertion order is preserved, which fixes the iteration order used by
/// the optimizer, gradient checks, and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `tensor` under `name`, replacing any previous entry.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.requires_grad = true;
        let (idx, _) = self.tensors.insert_full(name.into(), tensor);
        ParamId(idx)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.tensors
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Adds `delta` into the gradient buffer of `id`, allocating it on first use.
    pub(crate) fn accumulate(&mut self, id: ParamId, delta: &[f64]) {
        let t = &mut self.tensors[id.0];
        if !t.requires_grad {
            return;
        }
        let n = t.len();
        let g = t.grad.get_or_insert_with(|| vec![0.0; n]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    /// Adds `delta` (rows of width `cols`) into the listed rows of `id`'s gradient.
    pub(crate) fn accumulate_rows(&mut self, id: ParamId, rows: &[usize], delta: &[f64]) {
        let t = &mut self.tensors[id.0];
        if !t.requires_grad {
            return;
        }
        let n = t.len();
        let cols = *t.shape().last().unwrap();
        let g = t.grad.get_or_insert_with(|| vec![0.0; n]);
        for (k, &r) in rows.iter().enumerate() {
            let src = &delta[k * cols..(k + 1) * cols];
            for (a, b) in g[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    /// Rounds every value to `f32` precision.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
