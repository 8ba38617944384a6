use crate::element::Element;
use crate::error::{FlowError, Result};
use crate::graph::{Graph, NodeId, OpKernel};
use crate::tensor::Tensor;

fn check_same_shape<E: Element>(
    op: &'static str,
    g: &Graph<E>,
    a: NodeId,
    b: NodeId,
) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(FlowError::shape(
            op,
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

fn zip_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

struct AddKernel;

impl<E: Element> OpKernel<E> for AddKernel {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ]
    }
}

pub fn add<E: Element>(g: &mut Graph<E>, a: NodeId, b: NodeId) -> Result<NodeId> {
    check_same_shape("add", g, a, b)?;
    let value = zip_map(g.value(a), g.value(b), |x, y| x + y);
    Ok(g.push_op(value, vec![a, b], Box::new(AddKernel)))
}

struct SubKernel;

impl<E: Element> OpKernel<E> for SubKernel {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.map(|v| -v)),
        ]
    }
}

pub fn sub<E: Element>(g: &mut Graph<E>, a: NodeId, b: NodeId) -> Result<NodeId> {
    check_same_shape("sub", g, a, b)?;
    let value = zip_map(g.value(a), g.value(b), |x, y| x - y);
    Ok(g.push_op(value, vec![a, b], Box::new(SubKernel)))
}

struct MulKernel;

impl<E: Element> OpKernel<E> for MulKernel {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![
            needs[0].then(|| zip_map(grad, inputs[1], |g, y| g * y)),
            needs[1].then(|| zip_map(grad, inputs[0], |g, x| g * x)),
        ]
    }
}

/// Elementwise (Hadamard) product.
pub fn mul<E: Element>(g: &mut Graph<E>, a: NodeId, b: NodeId) -> Result<NodeId> {
    check_same_shape("mul", g, a, b)?;
    let value = zip_map(g.value(a), g.value(b), |x, y| x * y);
    Ok(g.push_op(value, vec![a, b], Box::new(MulKernel)))
}

struct AffineKernel<E> {
    a: E,
}

impl<E: Element> OpKernel<E> for AffineKernel<E> {
    fn name(&self) -> &'static str {
        "affine"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let a = self.a;
        vec![Some(grad.map(|v| v * a))]
    }
}

/// `y = a * x + b` with scalar constants; covers negation, `1 - x` and
/// constant scaling.
pub fn affine<E: Element>(g: &mut Graph<E>, x: NodeId, a: E, b: E) -> NodeId {
    let value = g.value(x).map(|v| a * v + b);
    g.push_op(value, vec![x], Box::new(AffineKernel { a }))
}

struct ReluKernel;

impl<E: Element> OpKernel<E> for ReluKernel {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let x = inputs[0];
        vec![Some(Tensor::from_fn(grad.shape(), |i| {
            if x.data()[i] > E::zero() {
                grad.data()[i]
            } else {
                E::zero()
            }
        }))]
    }
}

pub fn relu<E: Element>(g: &mut Graph<E>, x: NodeId) -> NodeId {
    let value = g.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
    g.push_op(value, vec![x], Box::new(ReluKernel))
}

struct SigmoidKernel;

impl<E: Element> OpKernel<E> for SigmoidKernel {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![Some(Tensor::from_fn(grad.shape(), |i| {
            let y = out.data()[i];
            grad.data()[i] * y * (E::one() - y)
        }))]
    }
}

pub fn sigmoid<E: Element>(g: &mut Graph<E>, x: NodeId) -> NodeId {
    let one = E::one();
    let value = g.value(x).map(|v| one / (one + (-v).exp()));
    g.push_op(value, vec![x], Box::new(SigmoidKernel))
}

struct TanhKernel;

impl<E: Element> OpKernel<E> for TanhKernel {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![Some(Tensor::from_fn(grad.shape(), |i| {
            let y = out.data()[i];
            grad.data()[i] * (E::one() - y * y)
        }))]
    }
}

pub fn tanh<E: Element>(g: &mut Graph<E>, x: NodeId) -> NodeId {
    let value = g.value(x).map(|v| v.tanh());
    g.push_op(value, vec![x], Box::new(TanhKernel))
}

struct SqrtKernel;

impl<E: Element> OpKernel<E> for SqrtKernel {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        // Subgradient 0 at the origin keeps losses finite when a residual
        // is exactly zero.
        let half = E::from_f64(0.5);
        vec![Some(Tensor::from_fn(grad.shape(), |i| {
            let y = out.data()[i];
            if y > E::zero() {
                grad.data()[i] * half / y
            } else {
                E::zero()
            }
        }))]
    }
}

/// Elementwise square root of non-negative inputs.
pub fn sqrt<E: Element>(g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
    if g.value(x).data().iter().any(|&v| v < E::zero()) {
        return Err(FlowError::NonFinite("sqrt of negative input".into()));
    }
    let value = g.value(x).map(|v| v.sqrt());
    Ok(g.push_op(value, vec![x], Box::new(SqrtKernel)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = sigmoid(&mut g, x);
        let t = tanh(&mut g, x);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(t).item(), 0.0);
    }

    #[test]
    fn relu_values_and_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = relu(&mut g, x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = ops::sum(&mut g, y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_negative_and_positive() {
        // upstream [1, 1] against x = [-1, 2] passes only the positive lane
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = relu(&mut g, x);
        let s = ops::sum(&mut g, y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(add(&mut g, a, b).is_err());
        assert!(mul(&mut g, a, b).is_err());
    }

    #[test]
    fn sqrt_rejects_negative() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(-1.0));
        assert!(sqrt(&mut g, x).is_err());
    }
}
