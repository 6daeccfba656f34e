//! Named parameter collections and their binding onto a tape.

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Ordered map from parameter name to value. Iteration order is insertion
/// order, which keeps checkpoints and optimizer sweeps deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    tensors: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore<S>) {
        self.tensors.extend(other.tensors);
    }

    /// Number of scalar entries across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a `requires_grad` leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Registers every tensor as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<S>, requires_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// `p ← p − lr·∇p` for every bound parameter. Parameters that received
    /// no gradient are left unchanged.
    pub fn sgd_step(&mut self, tape: &Tape<S>, bound: &Bound, lr: S) {
        for (name, value) in self.tensors.iter_mut() {
            let Some(var) = bound.vars.get(name) else { continue };
            let Some(grad) = tape.grad(*var) else { continue };
            for (p, &g) in value.data_mut().iter_mut().zip(grad) {
                *p = *p - lr * g;
            }
        }
    }

    /// [`sgd_step`](Self::sgd_step) with the step shortened so the global
    /// gradient norm does not exceed `clip_norm` (non-positive disables).
    pub fn sgd_step_clipped(&mut self, tape: &Tape<S>, bound: &Bound, lr: S, clip_norm: S) {
        let mut step = lr;
        if clip_norm > S::zero() {
            let norm = self.grad_norm(tape, bound);
            if norm > clip_norm {
                step = lr * clip_norm / norm;
            }
        }
        self.sgd_step(tape, bound, step);
    }

    /// Euclidean norm of all bound gradients.
    pub fn grad_norm(&self, tape: &Tape<S>, bound: &Bound) -> S {
        self.tensors
            .keys()
            .filter_map(|name| bound.vars.get(name).and_then(|v| tape.grad(*v)))
            .flatten()
            .map(|&g| g * g)
            .sum::<S>()
            .sqrt()
    }

    /// Flattened gradient of every parameter, zeros where absent.
    pub fn gradients(&self, tape: &Tape<S>, bound: &Bound) -> Vec<Vec<S>> {
        self.tensors
            .iter()
            .map(|(name, value)| {
                bound
                    .vars
                    .get(name)
                    .and_then(|v| tape.grad(*v))
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::zero(); value.len()])
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Binding from explicit `(name, var)` pairs.
    pub fn from_vars<N: Into<String>>(vars: impl IntoIterator<Item = (N, Var)>) -> Self {
        Self {
            vars: vars.into_iter().map(|(n, v)| (n.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "param lookup",
                msg: format!("no parameter named {name:?}"),
            })
    }

    pub fn merge(mut self, other: Bound) -> Bound {
        self.vars.extend(other.vars);
        self
    }
}

/// Fan-in scaled uniform weight `[fan_in × fan_out]` with bound
/// `1/√fan_in`, and a zero bias.
pub fn conv1x1_init<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let bound = S::one() / S::from_usize_lossy(fan_in).sqrt();
    let weight = Tensor::uniform(&[fan_in, fan_out], rng, -bound, bound)?;
    let bias = Tensor::zeros(&[fan_out])?;
    Ok((weight, bias))
}
