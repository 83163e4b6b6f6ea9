//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] in execution order, so the tape is
//! already a topological order of the computation graph. [`Tape::backward`]
//! walks it once in reverse. A tape can only be differentiated once;
//! build a new tape for the next step.

pub(crate) mod check;
mod graph_ops;
pub(crate) mod image;
mod loss;
pub(crate) mod ops;

pub use check::{finite_diff, gradcheck, registered_ops, GradCheckReport, ParamError, FD_EPS, GRADCHECK_TOL};
pub use graph_ops::{EdgeWeightSpec, NeighborLists, NeighborWeight};
pub use image::{bilinear_table, BatchNormMode, BatchNormStats};
pub use loss::DiceClasses;

use crate::error::{PsgrError, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub trait Backward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input given the gradient of the
    /// output. Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Origin<T: Scalar> {
    Leaf,
    Op {
        rule: Box<dyn Backward<T>>,
        inputs: Vec<Var>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    origin: Origin<T>,
}

/// Records a computation for later differentiation. Single owner; not
/// shared between threads while being built.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    differentiated: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            origin: Origin::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the output of a custom operation.
    pub fn push(
        &mut self,
        value: Tensor<T>,
        rule: impl Backward<T> + 'static,
        inputs: &[Var],
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            origin: Origin::Op {
                rule: Box::new(rule),
                inputs: inputs.to_vec(),
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    ///
    /// Fails if `loss` is not a single element, or if this tape has already
    /// been differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(PsgrError::Autograd(
                "backward already ran on this tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(PsgrError::Autograd(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let loss_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Origin::Op { rule, inputs } = &node.origin else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = rule.backward(&values, &node.value, &grad, &needs)?;
            if input_grads.len() != inputs.len() {
                return Err(PsgrError::Autograd(format!(
                    "{} returned {} gradients for {} inputs",
                    rule.name(),
                    input_grads.len(),
                    inputs.len()
                )));
            }
            for ((v, g), need) in inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                if g.shape() != self.nodes[v.0].value.shape() {
                    return Err(PsgrError::Autograd(format!(
                        "{} produced gradient of shape {:?} for input of shape {:?}",
                        rule.name(),
                        g.shape(),
                        self.nodes[v.0].value.shape()
                    )));
                }
                grads[v.0] = Some(match grads[v.0].take() {
                    Some(acc) => acc.add(&g)?,
                    None => g,
                });
            }
            grads[idx] = Some(grad);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
