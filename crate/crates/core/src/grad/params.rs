use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::Tensor;
use crate::container::{self, NamedTensor};
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Keeps only the tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Glorot-uniform weight in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.insert(name, Tensor::from_vec(fan_in, fan_out, data));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn init_filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.insert(name, Tensor::filled(rows, cols, v));
    }

    pub fn to_named(&self) -> Result<Vec<NamedTensor>> {
        self.tensors
            .iter()
            .map(|(k, t)| NamedTensor::from_f64(k.clone(), vec![t.rows() as u32, t.cols() as u32], t.data()))
            .collect()
    }

    pub fn from_named(tensors: &[NamedTensor]) -> Result<Self> {
        let mut store = ParamStore::new();
        for t in tensors {
            let (rows, cols) = match t.dims.as_slice() {
                [r, c] => (*r as usize, *c as usize),
                [n] => (1, *n as usize),
                _ => return Err(Error::Format(format!("parameter {} must be rank 1 or 2", t.name))),
            };
            store.insert(t.name.clone(), Tensor::from_vec(rows, cols, t.to_f64()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::save(path, &self.to_named()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named(&container::load(path)?)
    }

    /// Errors unless `other` holds exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (k, t) in &self.tensors {
            match other.get(k) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::Structural(format!(
                        "parameter {k}: shape {:?} != {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Structural(format!("parameter {k} missing"))),
            }
        }
        if other.len() != self.len() {
            return Err(Error::Structural("checkpoint has extra parameters".into()));
        }
        Ok(())
    }
}

/// A tape plus the parameter leaves bound into it by name.
pub struct Session<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: BTreeMap<String, NodeId>,
    trainable: bool,
}

impl<'p> Session<'p> {
    /// `trainable = false` binds parameters as constants (inference).
    pub fn new(store: &'p ParamStore, trainable: bool) -> Self {
        Self { tape: Tape::new(), store, bound: BTreeMap::new(), trainable }
    }

    pub fn with_tape(store: &'p ParamStore, trainable: bool, tape: Tape) -> Self {
        Self { tape, store, bound: BTreeMap::new(), trainable }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Binds the named parameter on first use.
    ///
    /// Panics when the store lacks `name`; model builders and their stores
    /// are generated from the same configuration.
    pub fn p(&mut self, name: &str) -> NodeId {
        if let Some(id) = self.bound.get(name) {
            return *id;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not present in store"))
            .clone();
        let id = self.tape.leaf(t, self.trainable);
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn bound(&self) -> &BTreeMap<String, NodeId> {
        &self.bound
    }

    /// Gradient for every parameter in the store; zeros where unbound or unreached.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.store
            .iter()
            .map(|(name, t)| {
                let g = match self.bound.get(name) {
                    Some(id) => grads.get_or_zeros(&self.tape, *id),
                    None => Tensor::zeros(t.rows(), t.cols()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}
