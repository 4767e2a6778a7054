//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and,
//! when any input requires a gradient, a [`Function`] that maps the output
//! gradient back onto its inputs. Nodes are appended in evaluation order, so a
//! reverse sweep over the tape is a valid topological order.
//!
//! Ops are deliberately coarse (whole convolutions, batch norm, fused loss
//! heads) to keep the tape short for per-frame video models.

mod conv;
mod norm;
mod ops;

pub use norm::BatchStats;
pub use ops::sigmoid_scalar;

use ndarray::{ArrayD, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of an operation. Implementors hold their input handles and
/// whatever they cached during the forward pass.
pub trait Function {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>);
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    function: Option<Box<dyn Function>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn standard(value: Tensor) -> Tensor {
    if value.is_standard_layout() {
        value
    } else {
        value.as_standard_layout().into_owned()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient (inputs, labels, frozen data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            requires_grad: false,
            function: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is retained by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            requires_grad: true,
            function: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Append the result of an operation. The backward rule is only built
    /// when one of `inputs` requires a gradient.
    pub fn push<F>(&mut self, value: Tensor, inputs: &[Var], function: impl FnOnce() -> F) -> Var
    where
        F: Function + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let function: Option<Box<dyn Function>> = if requires_grad {
            Some(Box::new(function()))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            function,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagate from a scalar (single element) node.
    pub fn backward(&self, root: Var) -> Gradients {
        let shape = self.shape(root).to_vec();
        assert_eq!(
            shape.iter().product::<usize>(),
            1,
            "backward root must be a scalar, got shape {shape:?}"
        );
        self.backward_with(root, Tensor::ones(IxDyn(&shape)))
    }

    /// Backpropagate an explicit output gradient (vector-Jacobian product).
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(root), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(function) = node.function.as_ref() else {
                continue;
            };
            // Intermediate gradients are released once consumed.
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                graph: self,
            };
            function.backward(&grad, self, &mut sink);
        }
        Gradients { grads }
    }
}

/// Gradients of the leaves after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Accumulator handed to [`Function::backward`].
pub struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
    graph: &'a Graph,
}

impl GradSink<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.graph.nodes[v.0].requires_grad
    }

    /// Add `g` (same shape as `v`) into the gradient of `v`.
    pub fn add(&mut self, v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.graph.shape(v), "gradient shape mismatch");
        let g = ops::standard(g);
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Mutate the (zero-initialised on first use) gradient buffer of `v` in
    /// place. Used by ops whose gradient only touches part of their input.
    pub fn add_with(&mut self, v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(IxDyn(self.graph.shape(v))));
        }
        f(slot.as_mut().expect("initialised above"));
    }
}

/// Reduce a broadcast gradient back onto `shape`.
pub(crate) fn sum_to_shape(mut g: Tensor, shape: &[usize]) -> Tensor {
    use ndarray::Axis;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}
