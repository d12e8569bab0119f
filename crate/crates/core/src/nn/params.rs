use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with gradient buffers and Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        if !value.is_finite() {
            return Err(Error::Contract(format!("parameter {name} is not finite")));
        }
        let id = self.names.len();
        let (r, c) = (value.rows(), value.cols());
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.values.push(value);
        self.grads.push(Tensor::zeros(r, c));
        self.first_moment.push(Tensor::zeros(r, c));
        self.second_moment.push(Tensor::zeros(r, c));
        Ok(ParamId(id))
    }

    /// Uniform(-a, a) with `a = gain * sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let a = gain * (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
        self.insert(name, Tensor::new(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        for (d, s) in self.grads[id.0].data_mut().iter_mut().zip(g.data()) {
            *d += s;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Multiplies every gradient by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// One bias-corrected Adam update; gradients are zeroed afterwards.
    pub fn adam_step(&mut self, opt: &Adam) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for k in 0..self.values.len() {
            let g = self.grads[k].data();
            let m = self.first_moment[k].data_mut();
            for (m, g) in m.iter_mut().zip(g) {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            }
            let v = self.second_moment[k].data_mut();
            for (v, g) in v.iter_mut().zip(g) {
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            }
            let m = self.first_moment[k].data();
            let v = self.second_moment[k].data();
            let w = self.values[k].data_mut();
            for i in 0..w.len() {
                w[i] -= opt.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + opt.eps);
            }
        }
        self.zero_grads();
    }

    /// Parameters and optimizer state as named flat arrays.
    pub fn to_arrays(&self, with_optimizer: bool) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect();
        if with_optimizer {
            for (k, name) in self.names.iter().enumerate() {
                out.push((format!("adam.m.{name}"), self.first_moment[k].clone()));
                out.push((format!("adam.v.{name}"), self.second_moment[k].clone()));
            }
            out.push(("adam.steps".into(), Tensor::scalar(self.steps as f64)));
        }
        out
    }

    /// Loads values (and optimizer state when present) by name. Every
    /// parameter of `self` must be present with a matching shape.
    pub fn load_arrays(&mut self, arrays: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: &str, like: &Tensor| -> Result<Option<Tensor>> {
            match lookup.get(name) {
                None => Ok(None),
                Some(t) if t.shape() == like.shape() => Ok(Some((*t).clone())),
                Some(t) => Err(Error::Compatibility(format!(
                    "{name}: stored shape {:?} vs model {:?}",
                    t.shape(),
                    like.shape()
                ))),
            }
        };
        for k in 0..self.names.len() {
            let name = self.names[k].clone();
            self.values[k] = fetch(&name, &self.values[k])?
                .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))?;
            if let Some(m) = fetch(&format!("adam.m.{name}"), &self.first_moment[k])? {
                self.first_moment[k] = m;
            }
            if let Some(v) = fetch(&format!("adam.v.{name}"), &self.second_moment[k])? {
                self.second_moment[k] = v;
            }
        }
        if let Some(t) = lookup.get("adam.steps") {
            self.steps = t.item() as u64;
        }
        self.zero_grads();
        Ok(())
    }
}
