//! Named trainable parameters and their binding onto tapes.

use std::collections::BTreeMap;

use rand::Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};

/// One trainable array with a stable name and its latest gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub grad: Option<Array>,
}

/// Ordered collection of parameters. Order is the storage order used by
/// checkpoints, so it must stay stable across runs of the same model shape.
#[derive(Clone, Debug, Default)]
pub struct Params {
    items: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

/// Tape-bound leaf vars, index-aligned with the owning [`Params`].
pub struct Bound {
    vars: Vec<Var>,
    by_name: BTreeMap<String, usize>,
}

impl Bound {
    pub fn var(&self, id: usize) -> &Var {
        &self.vars[id]
    }

    pub fn var_by_name(&self, name: &str) -> Option<&Var> {
        self.by_name.get(name).map(|&id| &self.vars[id])
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

impl Params {
    pub fn new() -> Params {
        Params::default()
    }

    /// Registers a parameter and returns its id. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, value: Array) -> usize {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = self.items.len();
        self.by_name.insert(name.clone(), id);
        self.items.push(Parameter { name, value, grad: None });
        id
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.items.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.items[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.items[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.iter_mut()
    }

    /// Creates differentiation leaves for every parameter on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.items.iter().map(|p| tape.var(p.value.clone())).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Pulls gradients for every parameter out of a backward pass. Missing
    /// gradients (parameters the loss does not reach) become zeros.
    pub fn absorb_grads(&mut self, bound: &Bound, grads: &Grads) {
        for (item, var) in self.items.iter_mut().zip(&bound.vars) {
            item.grad = Some(grads.wrt(var));
        }
    }

    pub fn clear_grads(&mut self) {
        for item in &mut self.items {
            item.grad = None;
        }
    }

    /// Copies values out in registration order as one flat buffer.
    pub fn flatten_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for p in &self.items {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Restores values from a flat buffer produced by [`Params::flatten_values`].
    pub fn unflatten_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Format(format!(
                "parameter payload holds {} values, model needs {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut off = 0;
        for p in &mut self.items {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Fan-in init with the bound shrunk by `scale`. Used for matrices that
/// write into a residual stream, keeping it near the layer-norm scale so
/// downstream tanh heads start well inside their linear range.
pub fn uniform_fan_in_scaled(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
    scale: f64,
) -> Array {
    let bound = scale / (fan_in as f64).sqrt();
    Array::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
