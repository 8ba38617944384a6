use std::sync::Arc;

use crate::element::Element;
use crate::error::{FlowError, Result};
use crate::graph::{Graph, NodeId, OpKernel};
use crate::ops::{axis_offsets, check_axes};
use crate::tensor::{Mask, Tensor};

struct SumKernel;

impl<E: Element> OpKernel<E> for SumKernel {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

/// Full reduction to a rank-0 scalar.
pub fn sum<E: Element>(g: &mut Graph<E>, x: NodeId) -> NodeId {
    let mut acc = E::zero();
    for &v in g.value(x).data() {
        acc = acc + v;
    }
    g.push_op(Tensor::scalar(acc), vec![x], Box::new(SumKernel))
}

struct MeanKernel;

impl<E: Element> OpKernel<E> for MeanKernel {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let n = E::from_usize(inputs[0].len());
        vec![Some(Tensor::full(inputs[0].shape(), grad.item() / n))]
    }
}

pub fn mean<E: Element>(g: &mut Graph<E>, x: NodeId) -> NodeId {
    let mut acc = E::zero();
    for &v in g.value(x).data() {
        acc = acc + v;
    }
    let n = E::from_usize(g.value(x).len());
    g.push_op(Tensor::scalar(acc / n), vec![x], Box::new(MeanKernel))
}

struct SumAxesKernel {
    axes: Vec<usize>,
}

impl<E: Element> OpKernel<E> for SumAxesKernel {
    fn name(&self) -> &'static str {
        "sum_axes"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (outer, inner) = axis_offsets(inputs[0].shape(), &self.axes);
        let mut gx = Tensor::zeros(inputs[0].shape());
        {
            let gd = gx.data_mut();
            for (o, &ooff) in outer.iter().enumerate() {
                let gv = grad.data()[o];
                for &ioff in &inner {
                    gd[ooff + ioff] = gv;
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Sum over the given axes; reduced axes are removed from the shape.
pub fn sum_axes<E: Element>(g: &mut Graph<E>, x: NodeId, axes: &[usize]) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    check_axes::<E>("sum_axes", &shape, axes)?;
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &s)| s)
        .collect();
    let (outer, inner) = axis_offsets(&shape, axes);
    let data = g.value(x).data();
    let mut out = Vec::with_capacity(outer.len());
    for &ooff in &outer {
        let mut acc = E::zero();
        for &ioff in &inner {
            acc = acc + data[ooff + ioff];
        }
        out.push(acc);
    }
    let value = Tensor::new(out_shape, out)?;
    Ok(g.push_op(
        value,
        vec![x],
        Box::new(SumAxesKernel {
            axes: axes.to_vec(),
        }),
    ))
}

struct L2NormKernel;

impl<E: Element> OpKernel<E> for L2NormKernel {
    fn name(&self) -> &'static str {
        "l2_norm"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let norm = out.item();
        let x = inputs[0];
        if norm <= E::zero() {
            return vec![Some(Tensor::zeros(x.shape()))];
        }
        let s = grad.item() / norm;
        vec![Some(x.map(|v| v * s))]
    }
}

/// Euclidean norm of the whole tensor, as a scalar.
pub fn l2_norm<E: Element>(g: &mut Graph<E>, x: NodeId) -> NodeId {
    let mut acc = E::zero();
    for &v in g.value(x).data() {
        acc = acc + v * v;
    }
    g.push_op(Tensor::scalar(acc.sqrt()), vec![x], Box::new(L2NormKernel))
}

struct MaskedMeanKernel {
    mask: Arc<Mask>,
    count: usize,
}

impl<E: Element> OpKernel<E> for MaskedMeanKernel {
    fn name(&self) -> &'static str {
        "masked_mean"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let gv = grad.item() / E::from_usize(self.count);
        let mask = self.mask.data();
        vec![Some(Tensor::from_fn(inputs[0].shape(), |i| {
            if mask[i] {
                gv
            } else {
                E::zero()
            }
        }))]
    }
}

/// Mean of the entries selected by `mask`. Rejects an empty selection.
pub fn masked_mean<E: Element>(g: &mut Graph<E>, x: NodeId, mask: &Arc<Mask>) -> Result<NodeId> {
    if mask.shape() != g.shape(x) {
        return Err(FlowError::shape(
            "masked_mean",
            format!("mask {:?} vs value {:?}", mask.shape(), g.shape(x)),
        ));
    }
    let count = mask.count_true();
    if count == 0 {
        return Err(FlowError::Config("masked_mean over empty mask".into()));
    }
    let data = g.value(x).data();
    let mut acc = E::zero();
    for (i, &m) in mask.data().iter().enumerate() {
        if m {
            acc = acc + data[i];
        }
    }
    let value = Tensor::scalar(acc / E::from_usize(count));
    Ok(g.push_op(
        value,
        vec![x],
        Box::new(MaskedMeanKernel {
            mask: Arc::clone(mask),
            count,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_one_to_four() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = mean(&mut g, x);
        assert_eq!(g.value(m).item(), 2.5);
    }

    #[test]
    fn sum_axes_removes_axes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = sum_axes(&mut g, x, &[0]).unwrap();
        assert_eq!(g.shape(s), &[3]);
        assert_eq!(g.value(s).data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn l2_norm_three_four() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let n = l2_norm(&mut g, x);
        assert_eq!(g.value(n).item(), 5.0);
    }

    #[test]
    fn masked_mean_selects() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![4], vec![1.0, 100.0, 3.0, 100.0]).unwrap());
        let mask = Arc::new(Mask::new(vec![4], vec![true, false, true, false]).unwrap());
        let m = masked_mean(&mut g, x, &mask).unwrap();
        assert_eq!(g.value(m).item(), 2.0);

        let empty = Arc::new(Mask::full(&[4], false));
        assert!(masked_mean(&mut g, x, &empty).is_err());
    }
}
