//! Named parameter storage and graph binding.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Rng, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// canonical order used by the optimizer and the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, checking names and shapes agree with `self`.
    pub fn replace_all(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::format(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for (i, (name, t)) in entries.iter().enumerate() {
            if *name != self.names[i] {
                return Err(Error::format(format!(
                    "tensor {i}: expected `{}`, found `{name}`",
                    self.names[i]
                )));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    op: "load",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        self.tensors = entries.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }
}

/// Graph handles for every parameter of a store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Borrows every parameter into `g`. Trainable leaves receive gradients.
    pub fn new<'a>(g: &mut Graph<'a>, store: &'a ParamStore, trainable: bool) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant_ref(t) })
            .collect();
        Self { vars }
    }

    /// Binds substitute values (e.g. noise-perturbed weights) in store order.
    pub fn owned(g: &mut Graph<'_>, values: Vec<Tensor>, trainable: bool) -> Self {
        let vars = values.into_iter().map(|t| g.leaf(t, trainable)).collect();
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Normal initializer scaled by `1/sqrt(fan_in)`.
pub fn init_linear(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    init_normal(rng, &[fan_in, fan_out], std)
}

pub fn init_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * std).collect())
        .expect("shape and data agree")
}
