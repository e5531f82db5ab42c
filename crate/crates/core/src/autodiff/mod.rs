//! Tape-based reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output value and, when
//! any input requires a gradient, a boxed [`Adjoint`] that maps the upstream
//! gradient to input gradients. [`Tape::backward`] replays those adjoints in
//! reverse recording order.

mod gradcheck;
mod ops;

pub use gradcheck::finite_difference_check;
pub use ops::CustomAdjoint;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a recorded operation.
pub trait Adjoint<T: Scalar> {
    /// Gradients for each input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    adjoint: Option<Box<dyn Adjoint<T>>>,
}

/// Ordered record of operations for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            adjoint: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Records an operation output. Fails if the value is not finite.
    pub fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: Vec<Var>,
        adjoint: impl Adjoint<T> + 'static,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let adjoint: Option<Box<dyn Adjoint<T>>> = if requires_grad { Some(Box::new(adjoint)) } else { None };
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            adjoint,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Populates gradients of every grad-tracked leaf with respect to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(adjoint) = node.adjoint.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = adjoint.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient; intermediates are consumed above.
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.inputs.is_empty() && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]. Unreached grad-tracked leaves hold zeros.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let c = tape.constant(Tensor::from_f64(&[2], &[5.0, 6.0]).unwrap());
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn cleared_tape_starts_fresh() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        tape.clear();
        assert!(tape.is_empty());
        assert!(tape.grad(x).is_none());
    }
}
