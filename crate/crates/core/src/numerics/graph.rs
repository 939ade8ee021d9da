use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Kinds of differentiable operations the graph can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    Relu,
    SoftmaxChannel,
    CrossEntropy,
    Mul,
    Add,
    Scale,
    Sum,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, cols: Vec<T> },
    Relu { input: Var },
    SoftmaxChannel { input: Var },
    CrossEntropy { logits: Var, labels: Vec<u8>, weights: Vec<T>, probs: Vec<T>, valid: usize },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::SoftmaxChannel { .. } => OpKind::SoftmaxChannel,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mul { .. } => OpKind::Mul,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
        })
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Define-by-run tape of tensor operations.
///
/// Nodes are appended in evaluation order, so every record's inputs precede
/// it and a single reverse sweep visits each record once. A graph created
/// with [`Graph::no_grad`] computes values only and keeps no backward state.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grad_enabled: bool,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, fault: None }
    }

    /// A graph that never records backward rules, for inference.
    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false, fault: None }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Corrupts the backward rule of one operation kind. Only used to verify
    /// that the gradient checks catch a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Leaf tracked for gradients (a trainable parameter or checked input).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes[var.0].grad.as_deref()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded operations that carry a backward rule.
    pub fn num_records(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad && n.op.kind().is_some()).count()
    }

    /// Recorded operations of one kind that carry a backward rule.
    pub fn count_records(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad && n.op.kind() == Some(kind)).count()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Whether an op on these inputs must be recorded for backward.
    pub(crate) fn tracks(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn accumulate(&mut self, var: Var, contribution: Vec<T>) {
        let node = &mut self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a = *a + *b),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar `loss`, accumulating `d loss / d var` into
    /// every reachable tensor that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);
        for index in (0..=loss.0).rev() {
            if !self.nodes[index].requires_grad {
                continue;
            }
            let Some(upstream) = self.nodes[index].grad.take() else {
                continue;
            };
            let mut contributions = self.backward_rule(index, &upstream);
            if let Some(kind) = self.fault {
                if self.nodes[index].op.kind() == Some(kind) {
                    for (_, c) in contributions.iter_mut() {
                        c.iter_mut().for_each(|v| *v = *v * T::of(1.5));
                    }
                }
            }
            self.nodes[index].grad = Some(upstream);
            for (var, contribution) in contributions {
                self.accumulate(var, contribution);
            }
        }
        Ok(())
    }
}
