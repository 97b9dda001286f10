//! Dense row-major `f64` tensors and named parameter stores.

use std::ops::Index;
use std::sync::Arc;

use crate::error::NumericError;
use crate::graph::{Graph, Var};

/// Row-major dense tensor. `grad` is present iff the tensor is trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, NumericError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NumericError::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite(format!(
                "tensor creation: value {} at index {}",
                values[i], i
            )));
        }
        Ok(Self {
            shape,
            values: Arc::new(values),
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: Arc::new(vec![0.0; n]),
            grad: None,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Result<Self, NumericError> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn vector(values: Vec<f64>) -> Result<Self, NumericError> {
        Self::new(vec![values.len()], values)
    }

    /// Marks the tensor trainable, allocating a zeroed gradient buffer.
    pub fn trainable(mut self) -> Self {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
        self
    }

    /// Drops the gradient buffer; backward passes will never write to it.
    pub fn frozen(mut self) -> Self {
        self.grad = None;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn shared_values(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    /// Copy-on-write access to the values.
    pub fn values_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Splits into (rows, cols) treating the last axis as columns.
    pub fn rows_cols(&self) -> (usize, usize) {
        rows_cols(&self.shape)
    }
}

pub(crate) fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&cols, rest)) => (rest.iter().product(), cols),
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph variables for every tensor of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn freeze(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn unfreeze(&mut self) {
        for t in &mut self.tensors {
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.len()]);
            }
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.tensors.iter().all(|t| !t.requires_grad())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    /// Adds the leaf gradients of `g` into the trainable tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (t, &var) in self.tensors.iter_mut().zip(bound.0.iter()) {
            if let (Some(dst), Some(src)) = (t.grad.as_mut(), g.grad(var)) {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
    }

    /// Concatenates all gradients in store order (zeros for frozen tensors).
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        out
    }

    pub fn into_named(self) -> Vec<(String, Tensor)> {
        self.names.into_iter().zip(self.tensors).collect()
    }

    /// Rounds every value to the nearest `f32` so 32-bit checkpoints reload exactly.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.values_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
