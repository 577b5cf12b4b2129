//! Minimal reverse-mode differentiable array engine.
//!
//! Everything is `f64`. A [`Graph`] records operations on [`Tensor`] values
//! and replays them backwards to produce [`Gradients`] for tracked
//! parameters. Frozen parameters enter the graph as untracked leaves, so no
//! gradient buffer is ever allocated for them.

mod gradcheck;
mod graph;
mod kernels;
mod layer;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub use gradcheck::{grad_check, relative_error};
pub use graph::{forward_layer, Graph, NodeId, DEFAULT_LOG_EPSILON};
pub use layer::LayerSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported layer kind `{0}`")]
    UnsupportedLayer(String),
    #[error("invalid layer description `{0}`")]
    InvalidLayer(String),
    #[error("probability row {row} sums to {sum}, expected 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("loss was not produced by recorded operations")]
    NoGraph,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    tracked: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values, grad: None, tracked: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], values: vec![v], grad: None, tracked: false }
    }

    /// Builds a tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn tracked(&self) -> bool {
        self.tracked
    }

    /// Untracking also drops any gradient buffer.
    pub fn set_tracked(&mut self, tracked: bool) {
        self.tracked = tracked;
        if !tracked {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    /// Returns `false` (and does nothing) for untracked tensors.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<bool> {
        if !self.tracked {
            return Ok(false);
        }
        if g.len() != self.values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "gradient of length {} for tensor {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(true)
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// A named weight tensor. A frozen parameter is never tracked.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub id: ParamId,
    pub name: String,
    tensor: Tensor,
    frozen: bool,
}

impl Parameter {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.tensor.set_tracked(!frozen);
    }

    /// Mutable access to the values, refused for frozen parameters.
    pub fn values_mut(&mut self) -> Option<&mut [f64]> {
        if self.frozen {
            None
        } else {
            Some(self.tensor.values_mut())
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.tensor.grad()
    }
}

/// Owns every parameter of a model, indexed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, frozen: bool) -> ParamId {
        let id = ParamId(self.params.len());
        tensor.set_tracked(!frozen);
        self.params.push(Parameter { id, name: name.into(), tensor, frozen });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.id).collect()
    }

    /// Total scalar count over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Accumulates `grads` into the parameters' buffers. Entries for frozen
    /// parameters are ignored.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.0 {
            self.params[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Overwrites the values of a parameter regardless of its frozen flag.
    /// Used for initialization and checkpoint loading only.
    pub fn load_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.params[id.0].tensor;
        if t.numel() != values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "parameter {id} expects {} values, got {}",
                t.numel(),
                values.len()
            )));
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }
}

/// Gradients keyed by parameter, produced by [`Graph::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<ParamId, Vec<f64>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn untracked_never_accumulates() {
        let mut t = Tensor::zeros(vec![3]).unwrap();
        assert!(!t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap());
        assert!(t.grad().is_none());
        t.set_tracked(true);
        assert!(t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap());
        assert!(t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap());
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn frozen_parameter_refuses_writes() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(vec![2]).unwrap(), true);
        assert!(store.get_mut(id).values_mut().is_none());
        assert!(!store.get(id).tensor().tracked());
        let mut g = Gradients::default();
        g.0.insert(id, vec![1.0, 1.0]);
        store.accumulate(&g).unwrap();
        assert!(store.get(id).grad().is_none());
    }
}
