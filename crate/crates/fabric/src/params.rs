//! Named parameters, initialisation and the Adam optimiser.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
    m: Vec<S>,
    v: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// All trainable tensors of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n = value.numel();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![S::zero(); n],
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform in `±sqrt(3 / fan_in)`.
    pub fn add_kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let t = Tensor::from_fn(shape, |_| S::lit(rng.sample(dist)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[S]) {
        let p = &mut self.params[id.0];
        p.grad.iter_mut().zip(g).for_each(|(d, s)| *d = *d + *s);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn scale_grads(&mut self, k: S) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = *g * k);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// One bias-corrected Adam update using the accumulated gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
        let c1 = S::lit(1.0 - cfg.beta1.powi(t));
        let c2 = S::lit(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (S::lit(cfg.lr), S::lit(cfg.eps));
        for p in &mut self.params {
            let data = p.value.data_mut();
            for (((x, &g), m), v) in data.iter_mut().zip(&p.grad).zip(&mut p.m).zip(&mut p.v) {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *x = *x - lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Flattened `(name, shape, values)` of every parameter.
    pub fn export(&self) -> Vec<(String, Vec<usize>, &[S])> {
        self.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data())).collect()
    }

    /// Overwrites a parameter's values by name, checking the shape.
    pub fn load(&mut self, name: &str, shape: &[usize], data: Vec<S>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != shape {
            return Err(Error::Shape(format!("parameter {name}: stored {shape:?}, model {:?}", p.value.shape())));
        }
        p.value = Tensor::new(shape, data)?;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: vec![T::zero(); p.grad.len()],
                    m: vec![T::zero(); p.m.len()],
                    v: vec![T::zero(); p.v.len()],
                })
                .collect(),
            by_name: self.by_name.clone(),
            step: self.step,
        }
    }
}
