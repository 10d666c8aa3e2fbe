//! Named trainable parameters and the visitor used by the optimizer and the
//! checkpoint writer.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named, gradient-carrying tensor owned by a model.
#[derive(Clone, Debug)]
pub struct Param<S> {
    name: String,
    pub tensor: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, mut tensor: Tensor<S>) -> Self {
        tensor.set_requires_grad(true);
        Param { name: name.into(), tensor }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Anything holding parameters and persistent buffers (batch-norm running
/// statistics). Visit order is the struct declaration order, so it is stable
/// across runs; names must be unique within one model.
pub trait ParamSet<S: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>));
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, &mut Vec<S>)) {}

    fn named_param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    fn total_param_elems(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.tensor.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.tensor.zero_grad());
    }
}

/// Move the tape gradients of every bound parameter back onto the parameter
/// tensors, accumulating into whatever is already there.
pub fn harvest_grads<S: Scalar>(
    graph: &crate::graph::Graph<S>,
    model: &mut impl ParamSet<S>,
) {
    model.visit_params(&mut |p| {
        if let Some(id) = graph.param_binding(p.name()) {
            if let Some(g) = graph.grad(id) {
                let g = g.to_vec();
                p.tensor.accumulate_grad(&g);
            }
        }
    });
}
