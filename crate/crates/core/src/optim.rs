//! AdamW with per-group learning rates and global-norm clipping.

use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ENCODER_PREFIX;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MOMENT1_PREFIX: &str = "adam.m/";
pub const MOMENT2_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `(name prefix, learning rate)`; the longest matching prefix wins.
    pub groups: Vec<(String, f64)>,
    pub default_lr: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(default_lr: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            groups: Vec::new(),
            default_lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Encoder parameters at `lr_encoder`, everything else at `lr_other`.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            groups: vec![(format!("{ENCODER_PREFIX}."), cfg.lr_encoder)],
            ..AdamW::new(cfg.lr_other)
        }
    }

    pub fn with_group(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.groups.push((prefix.into(), lr));
        self
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.default_lr, |&(_, lr)| lr)
    }

    /// Applies one update to every parameter of `store`. Every parameter must
    /// have an entry in `grads`.
    pub fn apply(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, t) in store.iter() {
            match grads.get(name) {
                None => return Err(Error::MissingGrad(name.to_string())),
                Some(g) if g.len() != t.len() => {
                    return Err(Error::Invalid(format!(
                        "gradient for {name} has {} entries, parameter has {}",
                        g.len(),
                        t.len()
                    )))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let rates: Vec<f64> = store.names().map(|n| self.lr_for(n)).collect();
        for ((name, param), lr) in store.iter_mut().zip(rates) {
            let g = &grads[name];
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, theta) in param.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let denom = v_hat.sqrt() + eps;
                let adam = if denom == 0.0 { 0.0 } else { m_hat / denom };
                *theta -= lr * adam + lr * wd * *theta;
            }
        }
        Ok(())
    }

    /// Moments as named tensors shaped like their parameters.
    pub fn moment_tensors(&self, store: &ParameterStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.moments {
            let Some(p) = store.get(name) else { continue };
            let shape = p.shape().to_vec();
            out.push((
                format!("{MOMENT1_PREFIX}{name}"),
                Tensor::new(shape.clone(), m.clone()).expect("moment shaped like parameter"),
            ));
            out.push((
                format!("{MOMENT2_PREFIX}{name}"),
                Tensor::new(shape, v.clone()).expect("moment shaped like parameter"),
            ));
        }
        out
    }

    /// Restores a moment saved by [`AdamW::moment_tensors`]; returns false
    /// for names that are not moments.
    pub fn load_moment(&mut self, name: &str, t: &Tensor) -> bool {
        let (param, first) = if let Some(p) = name.strip_prefix(MOMENT1_PREFIX) {
            (p, true)
        } else if let Some(p) = name.strip_prefix(MOMENT2_PREFIX) {
            (p, false)
        } else {
            return false;
        };
        let entry = self
            .moments
            .entry(param.to_string())
            .or_insert_with(|| (vec![0.0; t.len()], vec![0.0; t.len()]));
        if first {
            entry.0 = t.data().to_vec();
        } else {
            entry.1 = t.data().to_vec();
        }
        true
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; `0` disables.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
