use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Trainable,
    /// State carried alongside the weights (batch-norm running statistics).
    Buffer,
}

/// A named differentiable tensor: value, accumulated gradient, and kind.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    grad: Vec<f64>,
    kind: ParamKind,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn requires_grad(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    pub(crate) fn shared_value(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.value)
    }
}

/// Ordered, name-indexed collection of parameters and buffers.
///
/// Cloning is cheap: values are reference counted and only copied when one of
/// the clones is mutated.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, init: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let shape = init.shape().to_vec();
        let value = init.into_data();
        self.params.push(Param {
            name: name.clone(),
            grad: vec![0.0; value.len()],
            shape,
            value: Arc::new(value),
            kind,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// He-uniform initialised trainable weight: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn add_he_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, ParamKind::Trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        Arc::make_mut(&mut self.params[id.0].value).as_mut_slice()
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let p = &mut self.params[id.0];
        (Arc::make_mut(&mut p.value).as_mut_slice(), &p.grad)
    }

    /// Overwrite the accumulated gradient of one parameter.
    pub fn set_grad(&mut self, id: ParamId, grad: &[f64]) {
        self.params[id.0].grad.copy_from_slice(grad);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add the gradients of every parameter leaf on `tape` into the stored grads.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (var, id) in tape.param_leaves() {
            if let Some(g) = grads.get(var) {
                let p = &mut self.params[id.0];
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    /// Fold batch-norm running-statistic updates recorded during a train-mode
    /// forward pass into the stored buffers.
    pub fn apply_bn_updates(&mut self, tape: &mut Tape, momentum: f64) {
        for update in tape.take_bn_updates() {
            let mean = self.value_mut(update.running_mean);
            for (r, b) in mean.iter_mut().zip(&update.batch_mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            let var = self.value_mut(update.running_var);
            for (r, b) in var.iter_mut().zip(&update.batch_var_unbiased) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad())
            .map(|p| p.value.len())
            .sum()
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: model {:?}, checkpoint {:?}",
                    p.name, p.shape, src.shape
                )));
            }
            p.value = Arc::clone(&src.value);
        }
        Ok(())
    }
}
