//! Named parameter storage.
//!
//! Every learnable tensor lives in one [`ParamStore`] in declaration order;
//! weight layouts refer to tensors by [`ParamId`]. Binding a store to a tape
//! yields the matching [`Var`]s for one forward pass.

use std::ops::Index;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
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
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.tracked());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces every tensor's values, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{} value buffers for {} parameters",
                values.len(),
                self.tensors.len()
            )));
        }
        for (i, v) in values.into_iter().enumerate() {
            let shape = self.tensors[i].shape().to_vec();
            self.tensors[i] = Tensor::new(shape, v)?.tracked();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter as a tracked leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }
}

/// Tape handles for a store's parameters, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps handles already recorded in declaration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Draws initial parameter values.
///
/// Weight matrices come from a normal distribution truncated at two
/// standard deviations (out-of-range draws are resampled).
pub struct Initializer<'a> {
    rng: &'a mut RngState,
    std: f64,
}

impl<'a> Initializer<'a> {
    pub fn new(rng: &'a mut RngState, std: f64) -> Self {
        Self { rng, std }
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn truncated_normal<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break T::of(z * self.std);
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
    }
}
