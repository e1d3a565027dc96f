//! Named parameter arrays and their binding into a per-pass graph.

use std::collections::HashMap;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Input(format!("parameter {name} defined twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.arrays.push(value);
        Ok(ParamId(self.arrays.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.arrays[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array)> {
        self.names
            .iter()
            .zip(&self.arrays)
            .enumerate()
            .map(|(i, (n, a))| (ParamId(i), n.as_str(), a))
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn total_values(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.is_finite())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in self.names.iter().zip(&self.arrays) {
            h.update(name.as_bytes());
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in a.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-pass view of a [`ParamStore`] inside a [`Graph`]. Parameters become
/// graph leaves on first use, so a pass only copies what it touches.
pub struct Binder<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
    dropout_rng: Option<&'a mut Rng>,
}

impl<'a> Binder<'a> {
    /// Tracks gradients for every bound parameter.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
            dropout_rng: None,
        }
    }

    /// Forward-only evaluation.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::no_grad(),
            store,
            bound: vec![None; store.len()],
            trainable: false,
            dropout_rng: None,
        }
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: &'a mut Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout; identity unless dropout is enabled and `rate > 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.graph.value(x).shape().to_vec();
        let keep = 1.0 - rate;
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.graph.constant(Array::new(shape, mask)?);
        self.graph.mul(x, m)
    }

    /// Runs backward from `loss` and returns the gradient of every bound
    /// parameter that received one.
    pub fn gradients(&mut self, loss: Var) -> Result<Vec<(ParamId, Array)>> {
        self.graph.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect())
    }

    /// The graph variable a parameter was bound to, if any.
    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }
}
