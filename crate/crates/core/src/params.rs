//! Named parameter storage and per-forward graph sessions.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Graph, Var};
use crate::tensor::{invalid, Result, Tensor};

/// Hierarchical parameter name → tensor, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_requires_grad(true));
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }

    /// Adds gradients collected by [`Session::take_grads`].
    pub fn accumulate_grads(&mut self, grads: Vec<(String, Vec<f64>)>) -> Result<()> {
        for (name, g) in grads {
            let t = self
                .tensors
                .get_mut(&name)
                .ok_or_else(|| invalid("accumulate_grads", format!("unknown parameter {name}")))?;
            t.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for one parameter. Seeding from the name keeps a parameter's initial
/// value independent of which other components exist.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()))
}

pub fn init_uniform(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor {
    let mut rng = param_rng(seed, name);
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("init: invalid shape")
}

pub fn init_normal(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = param_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("init: invalid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("init: invalid shape")
}

/// Glorot-uniform bound `√(6/(fan_in+fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// One forward computation: a fresh [`Graph`] with parameters bound lazily
/// from a [`ParameterStore`].
pub struct Session<'s> {
    store: &'s ParameterStore,
    pub graph: Graph,
    bound: BTreeMap<String, Var>,
    training: bool,
    dropout_rng: ChaCha8Rng,
}

impl<'s> Session<'s> {
    /// Inference session: dropout disabled.
    pub fn new(store: &'s ParameterStore) -> Self {
        Session {
            store,
            graph: Graph::new(),
            bound: BTreeMap::new(),
            training: false,
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training session; `seed` drives dropout masks.
    pub fn training(store: &'s ParameterStore, seed: u64) -> Self {
        Session {
            training: true,
            dropout_rng: ChaCha8Rng::seed_from_u64(seed),
            ..Session::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    /// Graph node for parameter `name`, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| invalid("param", format!("unknown parameter {name}")))?;
        let mut value = t.clone();
        value.clear_grad();
        let v = self.graph.leaf(value.with_requires_grad(true));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        let shape = self.graph.shape(x).to_vec();
        let keep = 1.0 / (1.0 - p);
        let n = shape.iter().product();
        let dist = Uniform::new(0.0, 1.0);
        let data = (0..n)
            .map(|_| if dist.sample(&mut self.dropout_rng) < p { 0.0 } else { keep })
            .collect();
        let m = self.graph.constant(Tensor::new(shape, data)?);
        self.graph.mul(x, m)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every bound parameter, by name.
    pub fn take_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .graph
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.graph.value(v).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}
