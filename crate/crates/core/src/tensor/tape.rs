use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Maps `(input values, output value, upstream gradient)` to one optional
/// gradient per input, each flattened to the input's length.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// node vector is already a topological order and backward walks it in
/// reverse exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { nodes: Vec::new(), precision, consumed: false }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves with `requires_grad` collect gradients on backward.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        self.push(Node { value, grad: None, requires_grad, inputs: Vec::new(), backward: None })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a node with a caller-supplied backward rule. This is the
    /// hook for ops whose gradient is not the derivative of their forward,
    /// such as the straight-through pruning op.
    pub fn custom(&mut self, inputs: &[Var], mut value: Tensor, backward: BackwardFn) -> Var {
        self.precision.round_slice(value.data_mut());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            grad: None,
            requires_grad,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Propagates d(loss)/d(node) to every reachable node that requires a
    /// gradient. Gradients from multiple uses add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let (input_grads, inputs) = {
                let node = &self.nodes[idx];
                let (Some(g), Some(f)) = (node.grad.as_ref(), node.backward.as_ref()) else {
                    continue;
                };
                let input_values: Vec<&Tensor> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                (f(&input_values, &node.value, g), node.inputs.clone())
            };
            debug_assert_eq!(input_grads.len(), inputs.len());
            for (var, grad) in inputs.into_iter().zip(input_grads) {
                let Some(mut grad) = grad else { continue };
                let target = &mut self.nodes[var.0];
                if !target.requires_grad {
                    continue;
                }
                debug_assert_eq!(grad.len(), target.value.len());
                self.precision.round_slice(&mut grad);
                match target.grad.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grad) {
                            *a += g;
                        }
                        self.precision.round_slice(acc);
                    }
                    None => target.grad = Some(grad),
                }
            }
            // Interior nodes no longer need their closures.
            self.nodes[idx].backward = None;
        }
        Ok(())
    }
}
