use std::collections::HashMap;

use super::{Param, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward {
    fn inputs(&self) -> Vec<Var>;

    /// Gradients with respect to each of `inputs()`, in order. `None` for
    /// inputs that do not require a gradient.
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

pub(crate) struct BackwardCtx<'a> {
    nodes: &'a [Node],
    output: Var,
}

impl BackwardCtx<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn output(&self) -> &Tensor {
        &self.nodes[self.output.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

pub(crate) struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Box<dyn Backward>>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// One tape belongs to one forward/backward step. Operations are appended in
/// execution order, so inputs always precede the operations consuming them,
/// and [`Tape::backward`] walks the records in exact reverse order.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<usize, Var>,
    bound: Vec<(Var, Param)>,
    leaf_grads: HashMap<usize, Tensor>,
    relu_pattern: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            bound: Vec::new(),
            leaf_grads: HashMap::new(),
            relu_pattern: Vec::new(),
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter as a leaf. Registering the same storage twice
    /// returns the same variable, so gradients from every use accumulate.
    pub fn param(&mut self, p: &Param) -> Var {
        let id = p.storage_id();
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(p.value(), p.is_trainable());
        self.params.insert(id, v);
        self.bound.push((v, p.clone()));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Box<dyn Backward>) -> Var {
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then_some(op),
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record_relu_pattern(&mut self, input: &Tensor) {
        self.relu_pattern
            .extend(input.data().iter().map(|&v| v > 0.0));
    }

    /// Sign pattern of every relu input seen so far; two evaluations with
    /// different patterns straddle a kink.
    pub fn relu_pattern(&self) -> &[bool] {
        &self.relu_pattern
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients are kept on
    /// the tape and added into the bound parameters' `grad` slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.leaf_grads.clear();
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                None => {
                    self.leaf_grads.insert(i, g);
                }
                Some(op) => {
                    let ctx = BackwardCtx {
                        nodes: &self.nodes,
                        output: Var(i),
                    };
                    let inputs = op.inputs();
                    let input_grads = op.backward(&ctx, &g)?;
                    debug_assert_eq!(inputs.len(), input_grads.len());
                    for (v, ig) in inputs.into_iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !self.nodes[v.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(ig.shape(), self.nodes[v.0].value.shape());
                        match grads[v.0].as_mut() {
                            Some(acc) => acc.add_assign(&ig),
                            None => grads[v.0] = Some(ig),
                        }
                    }
                }
            }
        }
        for (v, p) in &self.bound {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                p.accumulate_grad(g);
            }
        }
        Ok(())
    }
}
