//! Finite-difference verification of analytic gradients.

use crate::element::Element;
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Relative error with the floor used across all gradient checks:
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error<E: Element>(a: E, b: E) -> E {
    let denom = a.abs().max(b.abs()).max(E::from_f64(1e-8));
    (a - b).abs() / denom
}

/// Compare the analytic gradient of a scalar-valued closure against
/// central finite differences `(f(x+eps) - f(x-eps)) / 2eps`, coordinate
/// by coordinate over every input. Returns the maximum relative error.
///
/// The closure receives a fresh graph and one variable id per input and
/// must return the scalar output node.
pub fn finite_diff_check<E, F>(build: F, inputs: &[Tensor<E>], eps: E) -> Result<E>
where
    E: Element,
    F: Fn(&mut Graph<E>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<E>]| -> Result<E> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    // Analytic gradients from one backward pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<E>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst = E::zero();
    let mut work: Vec<Tensor<E>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (eps + eps);
            let err = rel_error(analytic[k].data()[i], numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OpKernel;
    use crate::ops;

    #[test]
    fn linear_is_exact() {
        let inputs = vec![Tensor::from_fn(&[4], |i| 0.3 * i as f64 - 0.7)];
        let err = finite_diff_check(
            |g, ids| {
                let y = ops::affine(g, ids[0], 3.0, 0.0);
                Ok(ops::sum(g, y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "linear rel err {err}");
    }

    #[test]
    fn conv_relu_composite_passes() {
        // Inputs chosen so no pre-activation sits near the ReLU kink.
        let x = Tensor::from_fn(&[1, 4, 4], |i| ((i * 37 % 11) as f64 - 5.0) * 0.21 + 0.017);
        let w = Tensor::from_fn(&[2, 1, 3, 3], |i| ((i * 17 % 7) as f64 - 3.0) * 0.15 + 0.04);
        let b = Tensor::from_fn(&[2], |i| 0.21 * (i as f64 + 1.0));
        let err = finite_diff_check(
            |g, ids| {
                let y = ops::conv2d(g, ids[0], ids[1], ids[2], 1, 1)?;
                let r = ops::relu(g, y);
                Ok(ops::sum(g, r))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv+relu rel err {err}");
    }

    struct CorruptedScale;

    impl OpKernel<f64> for CorruptedScale {
        fn name(&self) -> &'static str {
            "corrupted_scale"
        }
        fn backward(
            &self,
            grad: &Tensor<f64>,
            _inputs: &[&Tensor<f64>],
            _out: &Tensor<f64>,
            _needs: &[bool],
        ) -> Vec<Option<Tensor<f64>>> {
            // Deliberately 10% too large: d/dx(2x) reported as 2.2.
            vec![Some(grad.map(|v| 2.0 * 1.1 * v))]
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged_near_ten_percent() {
        let inputs = vec![Tensor::from_fn(&[3], |i| 1.0 + i as f64)];
        let err = finite_diff_check(
            |g, ids| {
                let v = g.value(ids[0]).map(|v| 2.0 * v);
                let y = g.push_op(v, vec![ids[0]], Box::new(CorruptedScale));
                Ok(ops::sum(g, y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!((err - 0.1).abs() < 0.02, "expected ~0.1, got {err}");
    }
}
