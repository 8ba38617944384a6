use crate::element::Element;
use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape. Ids are issued in creation order, so the
/// id sequence is already a topological order of the recorded graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Analytic backward rule for one recorded operation.
///
/// `backward` receives the upstream gradient, the forward input values and
/// the forward output, and returns one gradient per input (`None` where
/// `needs[i]` is false or the rule has nothing to propagate).
pub trait OpKernel<E: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad_out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>>;
}

struct Node<E: Element> {
    value: Tensor<E>,
    inputs: Vec<NodeId>,
    kernel: Option<Box<dyn OpKernel<E>>>,
    needs_grad: bool,
}

/// Reverse-mode tape. Operations append nodes with their saved inputs and
/// a backward kernel; `backward` replays them in reverse id order with a
/// fixed accumulation order, so gradients are bit-reproducible.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
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

    /// Leaf that never receives a gradient (images, ground truth, masks).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Vec::new(), None, false)
    }

    /// Leaf whose gradient is wanted (parameters, gradcheck inputs).
    pub fn variable(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Vec::new(), None, true)
    }

    /// Record an operation result. `needs_grad` is inferred from inputs.
    pub fn push_op(
        &mut self,
        value: Tensor<E>,
        inputs: Vec<NodeId>,
        kernel: Box<dyn OpKernel<E>>,
    ) -> NodeId {
        let needs = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        debug_assert!(
            value.all_finite(),
            "non-finite output from {}",
            kernel.name()
        );
        self.push(value, inputs, Some(kernel), needs)
    }

    fn push(
        &mut self,
        value: Tensor<E>,
        inputs: Vec<NodeId>,
        kernel: Option<Box<dyn OpKernel<E>>>,
        needs_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            inputs,
            kernel,
            needs_grad,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` root w.r.t. `id`, if one reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Reverse sweep from a scalar root. Gradients accumulate per node in
    /// input order; nodes whose subtree holds no variables are skipped.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(FlowError::shape(
                "backward",
                format!("root must be scalar, got {:?}", root_val.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<E>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(root_val.shape(), E::one()));

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(kernel) = self.nodes[idx].kernel.as_ref() else {
                continue;
            };
            let grad_out = grads[idx].take().expect("checked above");
            let node = &self.nodes[idx];
            let input_vals: Vec<&Tensor<E>> =
                node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].needs_grad)
                .collect();
            let input_grads = kernel.backward(&grad_out, &input_vals, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            let input_ids: Vec<NodeId> = node.inputs.clone();
            grads[idx] = Some(grad_out);
            for (slot, g) in input_ids.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                debug_assert!(g.all_finite(), "non-finite gradient into node {}", slot.0);
                debug_assert_eq!(g.shape(), self.nodes[slot.0].value.shape());
                match &mut grads[slot.0] {
                    Some(acc) => {
                        let dst = acc.data_mut();
                        for (d, s) in dst.iter_mut().zip(g.data()) {
                            *d = *d + *s;
                        }
                    }
                    empty => *empty = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_fn(&[3], |i| i as f64));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // d/dx of sum(x * x) = 2x, exercised through double use of x.
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(vec![2], vec![3.0, -1.5]).unwrap());
        let y = ops::mul(&mut g, x, x).unwrap();
        let s = ops::sum(&mut g, y);
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx.data(), &[6.0, -3.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full(&[2], 2.0));
        let c = g.constant(Tensor::full(&[2], 5.0));
        let y = ops::mul(&mut g, x, c).unwrap();
        let s = ops::sum(&mut g, y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[5.0, 5.0]);
    }
}
