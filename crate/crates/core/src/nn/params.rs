use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Named trainable parameters with gradient accumulators, plus named
/// non-trainable buffers (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    params: Vec<Param<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
        }
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name) && !self.buffer_index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.params.push(Param {
            grad: Tensor::zeros(value.shape()),
            value,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> BufferId {
        assert!(
            !self.index.contains_key(name) && !self.buffer_index.contains_key(name),
            "duplicate buffer name {name}"
        );
        let id = self.buffers.len();
        self.buffer_index.insert(name.to_string(), id);
        self.buffer_names.push(name.to_string());
        self.buffers.push(value);
        BufferId(id)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).copied().map(BufferId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffer_names.iter().map(String::as_str).zip(&self.buffers)
    }

    /// Number of trainable scalars; buffers are not counted.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Marks each parameter trainable according to `pred(name)`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            p.trainable = pred(name);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data())
            .map(|g| g.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            buffer_index: self.buffer_index.clone(),
        }
    }

    /// Copies values (and buffers) from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names || self.buffer_names != other.buffer_names {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        self.buffers = other.buffers.clone();
        Ok(())
    }

    /// Replaces a named tensor (parameter or buffer) keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = if let Some(&i) = self.index.get(name) {
            &mut self.params[i].value
        } else if let Some(&i) = self.buffer_index.get(name) {
            &mut self.buffers[i]
        } else {
            return Err(Error::Shape(format!("no tensor named {name}")));
        };
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Replaces a parameter with a tensor of any shape, resetting its
    /// gradient. Optimizer state built for the old shape becomes invalid.
    pub fn reshape_param(&mut self, id: ParamId, value: Tensor<T>) {
        let p = &mut self.params[id.0];
        p.grad = Tensor::zeros(value.shape());
        p.value = value;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names
            .iter()
            .chain(&self.buffer_names)
            .map(String::as_str)
    }
}

/// He-uniform initialization: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::c(rng.gen_range(-bound..bound)))
}
