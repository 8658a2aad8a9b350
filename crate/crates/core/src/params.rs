//! Named trainable parameters and their binding onto a tape.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Stable handle to one parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Parameters in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        value.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform init in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-s..=s)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape and data agree"))
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

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf. With `trainable == false` the
    /// leaves carry no gradient, which skips all parameter bookkeeping in
    /// the reverse pass.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.clear_grad();
                t.set_requires_grad(trainable);
                tape.leaf(t)
            })
            .collect();
        Bound { vars }
    }

    /// Copies the gradients of the last backward pass into the stored tensors.
    pub fn pull_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            let g = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            t.set_grad(g).expect("gradient length matches parameter");
        }
    }
}

/// Parameters bound to one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
