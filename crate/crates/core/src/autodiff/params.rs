use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of model parameters.
///
/// Registration order is stable and defines the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        self.trainable.push(true);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
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

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites every value with zero.
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Replaces all values, checking names and shapes against the current layout.
    pub fn load_values(&mut self, names: &[String], values: Vec<Tensor>) -> Result<(), String> {
        if names.len() != self.names.len() {
            return Err(format!(
                "expected {} parameters, found {}",
                self.names.len(),
                names.len()
            ));
        }
        for (i, (n, v)) in names.iter().zip(&values).enumerate() {
            if n != &self.names[i] {
                return Err(format!(
                    "parameter {i} is named {n}, expected {}",
                    self.names[i]
                ));
            }
            if v.shape() != self.tensors[i].shape() {
                return Err(format!(
                    "parameter {n} has shape {:?}, expected {:?}",
                    v.shape(),
                    self.tensors[i].shape()
                ));
            }
        }
        self.tensors = values;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Initialization schemes used by the layers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, c),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
            Init::Uniform(a) => Tensor::from_fn(shape, |_| rng.random_range(-a..=a)),
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-a..=a))
            }
        }
    }
}
