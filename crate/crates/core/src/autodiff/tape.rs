use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernels: Var,
        stride: usize,
    },
    PickRows {
        choice: Vec<usize>,
        candidates: Vec<Var>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Exp(a) | Log(a) | Relu(a) | Sigmoid(a) | Clamp(a, _, _)
            | Transpose(a) | Reshape(a) | Sum(a, _) | Mean(a, _) => vec![*a],
            Conv2d { input, kernels, .. } | ConvTranspose2d { input, kernels, .. } => {
                vec![*input, *kernels]
            }
            PickRows { candidates, .. } => candidates.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Neg(..) => "neg",
            Scale(..) => "scale",
            Exp(..) => "exp",
            Log(..) => "log",
            Relu(..) => "relu",
            Sigmoid(..) => "sigmoid",
            Clamp(..) => "clamp",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Reshape(..) => "reshape",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Conv2d { .. } => "conv2d",
            ConvTranspose2d { .. } => "conv_transpose2d",
            PickRows { .. } => "pick_rows",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) scope: Option<&'static str>,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape is single-threaded; independent tapes can live on separate threads.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    scope: Option<&'static str>,
}

/// Summary of one recorded node, for graph inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInfo {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub scope: Option<&'static str>,
    pub inputs: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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
            op: Op::Leaf,
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records every node created inside `f` under `name`.
    pub fn scoped<R>(&mut self, name: &'static str, f: impl FnOnce(&mut Tape) -> R) -> R {
        let outer = self.scope.replace(name);
        let out = f(self);
        self.scope = outer;
        out
    }

    pub fn count_in_scope(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.scope == Some(name)).count()
    }

    pub fn info(&self, v: Var) -> NodeInfo {
        let node = &self.nodes[v.0];
        NodeInfo {
            op: node.op.name(),
            shape: node.value.shape().to_vec(),
            scope: node.scope,
            inputs: node.op.inputs(),
        }
    }

    /// Whether `target` lies on some path that ends in `from`.
    pub fn depends_on(&self, from: Var, target: Var) -> bool {
        if target.0 > from.0 {
            return false;
        }
        let mut reach = vec![false; from.0 + 1];
        reach[from.0] = true;
        for i in (target.0..=from.0).rev() {
            if !reach[i] {
                continue;
            }
            if i == target.0 {
                return true;
            }
            for input in self.nodes[i].op.inputs() {
                reach[input.0] = true;
            }
        }
        false
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Each node is visited once, in reverse recording order; gradients of a value
    /// used in several places accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts_unchecked(
            loss_value.shape().to_vec(),
            vec![1.0],
        ));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require grad or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
