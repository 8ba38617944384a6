use crate::element::Element;
use crate::error::{FlowError, Result};
use crate::graph::{Graph, NodeId, OpKernel};
use crate::tensor::Tensor;

/// Block structure for axis-wise splits: every tensor is `outer` blocks of
/// `axis_len * inner` contiguous elements.
fn block_dims(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, inner)
}

struct ConcatKernel {
    axis: usize,
    parts: Vec<usize>,
}

impl<E: Element> OpKernel<E> for ConcatKernel {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (outer, inner) = block_dims(grad.shape(), self.axis);
        let total_axis: usize = self.parts.iter().sum();
        let gd = grad.data();
        let mut start = 0usize;
        let mut grads = Vec::with_capacity(inputs.len());
        for (k, &part) in self.parts.iter().enumerate() {
            if !needs[k] {
                start += part;
                grads.push(None);
                continue;
            }
            let mut gx = Tensor::zeros(inputs[k].shape());
            {
                let dst = gx.data_mut();
                for o in 0..outer {
                    let src_base = (o * total_axis + start) * inner;
                    let dst_base = o * part * inner;
                    dst[dst_base..dst_base + part * inner]
                        .copy_from_slice(&gd[src_base..src_base + part * inner]);
                }
            }
            start += part;
            grads.push(Some(gx));
        }
        grads
    }
}

/// Concatenate along `axis`; all other dimensions must match.
pub fn concat<E: Element>(g: &mut Graph<E>, axis: usize, ids: &[NodeId]) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(FlowError::shape("concat", "no inputs"));
    }
    let first = g.shape(ids[0]).to_vec();
    if axis >= first.len() {
        return Err(FlowError::shape(
            "concat",
            format!("axis {} out of range for {:?}", axis, first),
        ));
    }
    let mut parts = Vec::with_capacity(ids.len());
    for &id in ids {
        let s = g.shape(id);
        if s.len() != first.len()
            || s.iter()
                .zip(&first)
                .enumerate()
                .any(|(d, (a, b))| d != axis && a != b)
        {
            return Err(FlowError::shape(
                "concat",
                format!("{:?} vs {:?} on axis {}", s, first, axis),
            ));
        }
        parts.push(s[axis]);
    }
    let mut out_shape = first.clone();
    out_shape[axis] = parts.iter().sum();
    let (outer, inner) = block_dims(&out_shape, axis);
    let total_axis = out_shape[axis];

    let mut data = vec![E::zero(); outer * total_axis * inner];
    let mut start = 0usize;
    for (&id, &part) in ids.iter().zip(&parts) {
        let src = g.value(id).data();
        for o in 0..outer {
            let dst_base = (o * total_axis + start) * inner;
            let src_base = o * part * inner;
            data[dst_base..dst_base + part * inner]
                .copy_from_slice(&src[src_base..src_base + part * inner]);
        }
        start += part;
    }
    let value = Tensor::new(out_shape, data)?;
    Ok(g.push_op(
        value,
        ids.to_vec(),
        Box::new(ConcatKernel {
            axis,
            parts,
        }),
    ))
}

struct SliceAxisKernel {
    axis: usize,
    start: usize,
}

impl<E: Element> OpKernel<E> for SliceAxisKernel {
    fn name(&self) -> &'static str {
        "slice_axis"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let in_shape = inputs[0].shape();
        let (outer, inner) = block_dims(in_shape, self.axis);
        let full_axis = in_shape[self.axis];
        let part = grad.shape()[self.axis];
        let mut gx = Tensor::zeros(in_shape);
        {
            let dst = gx.data_mut();
            let gd = grad.data();
            for o in 0..outer {
                let dst_base = (o * full_axis + self.start) * inner;
                let src_base = o * part * inner;
                dst[dst_base..dst_base + part * inner]
                    .copy_from_slice(&gd[src_base..src_base + part * inner]);
            }
        }
        vec![Some(gx)]
    }
}

/// Contiguous slice `start..end` along `axis`.
pub fn slice_axis<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    axis: usize,
    start: usize,
    end: usize,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if axis >= shape.len() || start >= end || end > shape[axis] {
        return Err(FlowError::shape(
            "slice_axis",
            format!("{}..{} on axis {} of {:?}", start, end, axis, shape),
        ));
    }
    let (outer, inner) = block_dims(&shape, axis);
    let full_axis = shape[axis];
    let part = end - start;
    let src = g.value(x).data();
    let mut data = vec![E::zero(); outer * part * inner];
    for o in 0..outer {
        let src_base = (o * full_axis + start) * inner;
        let dst_base = o * part * inner;
        data[dst_base..dst_base + part * inner]
            .copy_from_slice(&src[src_base..src_base + part * inner]);
    }
    let mut out_shape = shape;
    out_shape[axis] = part;
    let value = Tensor::new(out_shape, data)?;
    Ok(g.push_op(value, vec![x], Box::new(SliceAxisKernel { axis, start })))
}

struct ReshapeKernel;

impl<E: Element> OpKernel<E> for ReshapeKernel {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![Some(grad.reshaped(inputs[0].shape()).expect("same length"))]
    }
}

pub fn reshape<E: Element>(g: &mut Graph<E>, x: NodeId, shape: &[usize]) -> Result<NodeId> {
    let value = g.value(x).reshaped(shape)?;
    Ok(g.push_op(value, vec![x], Box::new(ReshapeKernel)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn concat_axis1_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 5], |i| 100.0 + i as f64));
        let c = concat(&mut g, 1, &[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
        assert_eq!(g.value(c).at(&[1, 2]), 5.0);
        assert_eq!(g.value(c).at(&[1, 3]), 105.0);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(concat(&mut g, 1, &[a, b]).is_err());
    }

    #[test]
    fn slice_roundtrips_through_concat() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_fn(&[4, 2], |i| i as f64));
        let lo = slice_axis(&mut g, x, 0, 0, 2).unwrap();
        let hi = slice_axis(&mut g, x, 0, 2, 4).unwrap();
        let back = concat(&mut g, 0, &[lo, hi]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let s = ops::sum(&mut g, back);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
