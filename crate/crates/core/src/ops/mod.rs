//! Differentiable operations recorded on the [`Graph`](crate::Graph) tape.
//!
//! Each operation is a free function that validates shapes, computes the
//! forward value eagerly and pushes a backward kernel. Domain-specific
//! kernels (cost volume, lookup, recovery) live in their own modules and
//! use the same mechanism.

mod arith;
mod nn;
mod reduce;
mod shape;

pub use arith::{add, affine, mul, relu, sigmoid, sqrt, sub, tanh};
pub use nn::{avg_pool2, bilinear_sample, conv2d, softmax, softmax_masked, upsample2d};
pub(crate) use nn::Tap;
pub use reduce::{l2_norm, masked_mean, mean, sum, sum_axes};
pub use shape::{concat, reshape, slice_axis};

use crate::element::Element;
use crate::error::{FlowError, Result};

/// Decompose `shape` into offset tables for iterating groups over `axes`:
/// every element offset is `outer[o] + inner[i]` with `inner` spanning the
/// reduction axes and `outer` the rest.
pub(crate) fn axis_offsets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let in_axes = |d: usize| axes.contains(&d);

    let build = |selector: &dyn Fn(usize) -> bool| -> Vec<usize> {
        let dims: Vec<usize> = (0..rank).filter(|&d| selector(d)).collect();
        let count: usize = dims.iter().map(|&d| shape[d]).product();
        let mut offsets = Vec::with_capacity(count.max(1));
        let mut idx = vec![0usize; dims.len()];
        loop {
            let off: usize = dims.iter().zip(&idx).map(|(&d, &i)| strides[d] * i).sum();
            offsets.push(off);
            let mut carry = true;
            for k in (0..dims.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[dims[k]] {
                    carry = false;
                    break;
                }
                idx[k] = 0;
            }
            if carry {
                break;
            }
        }
        offsets
    };

    (build(&|d| !in_axes(d)), build(&|d| in_axes(d)))
}

pub(crate) fn check_axes<E: Element>(
    op: &'static str,
    shape: &[usize],
    axes: &[usize],
) -> Result<()> {
    if axes.is_empty() {
        return Err(FlowError::shape(op, "empty axis set"));
    }
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(FlowError::shape(
                op,
                format!("axis {} out of range for shape {:?}", a, shape),
            ));
        }
        if seen[a] {
            return Err(FlowError::shape(op, format!("duplicate axis {}", a)));
        }
        seen[a] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_cover_all_elements() {
        let (outer, inner) = axis_offsets(&[2, 3, 4], &[1]);
        assert_eq!(outer.len(), 8);
        assert_eq!(inner.len(), 3);
        let mut all: Vec<usize> = outer
            .iter()
            .flat_map(|&o| inner.iter().map(move |&i| o + i))
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
    }
}
