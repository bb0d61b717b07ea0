use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A named trainable tensor. Frozen parameters are never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
    pub grad: Option<Tensor<T>>,
}

/// A named non-trainable tensor (running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    param_index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            param_index: HashMap::new(),
            buffer_index: HashMap::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.param_index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(Error::invalid("param", format!("duplicate name `{name}`")));
        }
        let id = self.params.len();
        self.param_index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            frozen: false,
            grad: None,
        });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.param_index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(Error::invalid("buffer", format!("duplicate name `{name}`")));
        }
        let id = self.buffers.len();
        self.buffer_index.insert(name.clone(), id);
        self.buffers.push(Buffer { name, tensor });
        Ok(BufferId(id))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].tensor
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.param_index.get(name).copied().map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).copied().map(BufferId)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut count = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            count += 1;
        }
        count
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.shape().numel()).sum()
    }

    /// Copy of the store in another precision (frozen flags kept, grads dropped).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                    grad: None,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    tensor: b.tensor.cast(),
                })
                .collect(),
            param_index: self.param_index.clone(),
            buffer_index: self.buffer_index.clone(),
        }
    }

    /// Overwrites values of same-named entries from `other`; returns how many matched.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut matched = 0;
        for p in &other.params {
            if let Some(id) = self.find_param(&p.name) {
                let dst = &mut self.params[id.0].tensor;
                if dst.shape() != p.tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load params",
                        expected: dst.shape(),
                        found: p.tensor.shape(),
                    });
                }
                *dst = p.tensor.clone();
                matched += 1;
            }
        }
        for b in &other.buffers {
            if let Some(id) = self.find_buffer(&b.name) {
                self.buffers[id.0].tensor = b.tensor.clone();
                matched += 1;
            }
        }
        Ok(matched)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder for a nested scope; names become `prefix.scope.name`.
    pub fn sub(&mut self, scope: &str) -> Builder<'_, T, R> {
        let prefix = self.path(scope);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: Shape, init: Init) -> Result<ParamId> {
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                Tensor::randn(shape, std, self.rng)
            }
        };
        let path = self.path(name);
        self.store.add_param(path, tensor)
    }

    pub fn buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<BufferId> {
        let path = self.path(name);
        self.store.add_buffer(path, tensor)
    }
}
