//! Minimal reverse-mode differentiation kernel.
//!
//! Values live on a [`Graph`] (a Wengert tape) as row-major matrices; a
//! vector is a `1 x n` node. Trainable parameters live in a [`ParamStore`]
//! and enter a graph as leaves, so one backward pass accumulates gradients
//! for every parameter that took part in the forward pass.
//!
//! All arithmetic is `f64`.

pub mod check;
mod graph;
mod optim;

use std::ops::Deref;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub use graph::{Graph, Mode, Var};
pub use optim::{Adam, AdamConfig};

use crate::{Error, Result};

/// A dense real vector; the value carrier passed between modules.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor1(Vec<f64>);

pub type FeatureVector = Tensor1;

impl Tensor1 {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Tensor1 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Tensor1 {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable matrix and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
    ) -> ParamId {
        assert_eq!(value.len(), rows * cols, "parameter value has wrong length");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            rows,
            cols,
            grad: vec![0.0; value.len()],
            value,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copy of all parameter values, in store order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value.copy_from_slice(v);
        }
    }
}

/// Fully connected layer `y = W x + b`, with `W` stored `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineLayer {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "layer {name}: dims must be > 0 (in={in_dim}, out={out_dim})"
            )));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let weight: Vec<f64> = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Ok(Self::from_values(
            store,
            name,
            in_dim,
            out_dim,
            weight,
            vec![0.0; out_dim],
        ))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_values(
            store,
            name,
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            vec![0.0; out_dim],
        )
    }

    pub fn from_values(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), out_dim, in_dim, weight);
        let bias = store.add(format!("{name}.bias"), 1, out_dim, bias);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Evaluate on a plain vector without recording a graph.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Tensor1> {
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(1, x.len(), x.to_vec());
        let y = g.affine(store, self, xv)?;
        Ok(Tensor1::new(g.value(y).to_vec()))
    }
}

pub(crate) fn ensure_finite(stage: &str, values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: stage.to_string(),
            detail: format!("entry {i} is {}", values[i]),
        });
    }
    Ok(())
}
