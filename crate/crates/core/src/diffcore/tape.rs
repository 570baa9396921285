use std::hash::Hasher;

use super::conv::{self, ConvGeom};
use super::loss;
use super::norm;
use super::pointwise::{self, Activation};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Deconv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Concat {
        a: Var,
        b: Var,
    },
    ConcatBatch {
        parts: Vec<Var>,
    },
    NarrowBatch {
        input: Var,
        offset: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Vec<T>,
    },
    Reshape {
        input: Var,
    },
    TotalVariation {
        input: Var,
    },
    Bce {
        input: Var,
        real: bool,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Record of executed differentiable operations, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are appended in execution order, so every operation's inputs sit at
/// lower indices than its output.
pub struct Tape<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Leaves with `requires_grad` accumulate
    /// gradients across repeated [`Tape::backward`] calls.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.zero_grad();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Clears every gradient, including accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add_grad(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(g.len(), node.value.numel());
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    /// Hash of the branch taken at every non-differentiable point recorded
    /// so far: the sign of each relu-family input, of each neighbour
    /// difference under total variation, and whether each probability was
    /// clamped in a cross-entropy. Two evaluations with equal signatures lie
    /// on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        let mut put = |v: T| h.write_i8(if v > T::zero() { 1 } else if v < T::zero() { -1 } else { 0 });
        for node in &self.nodes {
            match &node.op {
                Op::Activation {
                    input,
                    kind: Activation::Relu | Activation::LeakyRelu(_),
                } => self.nodes[input.0].value.data().iter().for_each(|&v| put(v)),
                Op::TotalVariation { input } => {
                    let x = &self.nodes[input.0].value;
                    let (_, _, hh, w) = x.nchw().expect("checked in forward");
                    for plane in x.data().chunks(hh * w) {
                        for i in 0..hh {
                            for j in 0..w {
                                if j + 1 < w {
                                    put(plane[i * w + j + 1] - plane[i * w + j]);
                                }
                                if i + 1 < hh {
                                    put(plane[(i + 1) * w + j] - plane[i * w + j]);
                                }
                            }
                        }
                    }
                }
                Op::Bce { input, .. } => {
                    let eps = T::lit(loss::LOG_CLAMP);
                    for &p in self.nodes[input.0].value.data() {
                        put(if p < eps { -T::one() } else if p > T::one() - eps { T::one() } else { T::zero() });
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Intermediate gradients are recomputed on every call; leaf gradients
    /// accumulate until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got a tensor with {numel} values (dims {:?})",
                self.nodes[loss.0].value.dims()
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.add_grad(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, gv) in contributions {
                self.add_grad(v, gv);
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => conv::conv2d_backward(self, *input, *kernel, *bias, geom, g),
            Op::Deconv2d {
                input,
                kernel,
                bias,
                geom,
            } => conv::deconv2d_backward(self, *input, *kernel, *bias, geom, g),
            Op::Activation { input, kind } => {
                pointwise::activation_backward(self, *input, &node.value, *kind, g)
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => norm::batch_norm_backward(
                self,
                (*input, *gamma, *beta),
                xhat,
                inv_std,
                *batch_stats,
                g,
            ),
            Op::Concat { a, b } => pointwise::concat_backward(self, *a, *b, g),
            Op::ConcatBatch { parts } => pointwise::concat_batch_backward(self, parts, g),
            Op::NarrowBatch { input, offset } => pointwise::narrow_batch_backward(self, *input, *offset, g),
            Op::Add { a, b } => {
                let mut out = Vec::new();
                for v in [a, b] {
                    if self.needs(*v) {
                        out.push((*v, g.to_vec()));
                    }
                }
                out
            }
            Op::Scale { input, factor } => {
                vec![(*input, g.iter().map(|&x| x * *factor).collect())]
            }
            Op::Sum { input } => {
                vec![(*input, vec![g[0]; self.value(*input).numel()])]
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                vec![(*input, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::Dot { input, weights } => {
                vec![(*input, weights.iter().map(|&w| w * g[0]).collect())]
            }
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::TotalVariation { input } => loss::total_variation_backward(self, *input, g[0]),
            Op::Bce { input, real } => loss::bce_backward(self, *input, *real, g[0]),
        }
    }
}
