//! Parameter containers shared by every trainable module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Ordered list of named parameter tensors. Flat export walks the list in
/// order and each tensor in row-major order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Appends a `fan_in×fan_out` weight and a bias, both drawn from
    /// uniform(−1/√fan_in, 1/√fan_in). Returns the weight index.
    pub fn push_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> usize {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut r = rng::rng(seed);
        let w = (0..fan_in * fan_out)
            .map(|_| r.gen_range(-bound..=bound))
            .collect();
        let b = (0..fan_out).map(|_| r.gen_range(-bound..=bound)).collect();
        let i = self.push(format!("{name}.weight"), Tensor::param(vec![fan_in, fan_out], w));
        self.push(format!("{name}.bias"), Tensor::param(vec![fan_out], b));
        i
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn export_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.count());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn import_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::Length {
                what: "parameter import",
                expected: self.count(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape.clone()).collect()
    }

    /// Records every tensor on the tape; `trainable` controls gradient flow.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.tensor(t, trainable)).collect()
    }

    /// Records caller-supplied values in place of the stored ones.
    pub fn bind_values<S: Scalar>(&self, tape: &mut Tape<S>, values: &[Vec<S>], trainable: bool) -> Result<Vec<Var>> {
        if values.len() != self.tensors.len() {
            return Err(Error::Length {
                what: "bound tensors",
                expected: self.tensors.len(),
                got: values.len(),
            });
        }
        self.tensors
            .iter()
            .zip(values)
            .map(|(t, v)| tape.leaf(t.shape.clone(), v.clone(), trainable))
            .collect()
    }

    pub fn values<S: Scalar>(&self) -> Vec<Vec<S>> {
        self.tensors
            .iter()
            .map(|t| t.data.iter().map(|&x| S::from_f32(x)).collect())
            .collect()
    }

    pub fn accumulate_grads<S: Scalar>(&mut self, tape: &Tape<S>, grads: &Gradients<S>, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if tape.requires_grad(v) {
                match grads.get(v) {
                    Some(g) => t.accumulate_grad(g),
                    None => t.accumulate_grad(&vec![S::zero(); t.len()]),
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// `x·w + b` with `b` broadcast over rows.
pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Layer norm over the last axis followed by an optional per-channel affine.
pub fn layer_norm<S: Scalar>(tape: &mut Tape<S>, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
    let y = tape.layer_norm(x)?;
    match affine {
        Some((g, b)) => {
            let y = tape.mul(y, g)?;
            tape.add(y, b)
        }
        None => Ok(y),
    }
}
