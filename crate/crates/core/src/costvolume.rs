//! All-pairs cost volume between two feature maps and its pooled pyramid.
//!
//! Entry `(i, j, k, l)` of the level-0 volume is the channel dot product
//! between the source feature at pixel `(i, j)` and the target feature at
//! `(k, l)`, times a configurable scale. Storing the volume as 4-D
//! `[H, W, H, W]` keeps the flattened index `k*W + l` addressable as
//! `(k, l)` without index arithmetic; coarser levels average-pool the two
//! trailing (target) axes.

use crate::element::Element;
use crate::error::{FlowError, Result};
use crate::graph::{Graph, NodeId, OpKernel};
use crate::ops;
use crate::tensor::Tensor;

/// Feature map of one frame at lookup resolution.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub node: NodeId,
    pub frame_id: i64,
}

/// How dot products are scaled when building a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrScale {
    /// Raw dot products.
    One,
    /// Dot products divided by sqrt(feature dimension).
    InvSqrtDim,
}

impl CorrScale {
    pub fn factor(self, feature_dim: usize) -> f64 {
        match self {
            CorrScale::One => 1.0,
            CorrScale::InvSqrtDim => 1.0 / (feature_dim as f64).sqrt(),
        }
    }
}

/// Cost volume plus its spatially pooled levels; level `l` has shape
/// `[H, W, H/2^l, W/2^l]`.
#[derive(Clone, Debug)]
pub struct CostVolumePyramid {
    pub levels: Vec<NodeId>,
    pub scale_factor: f64,
}

impl CostVolumePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

struct CorrVolumeKernel<E> {
    scale: E,
}

impl<E: Element> OpKernel<E> for CorrVolumeKernel<E> {
    fn name(&self) -> &'static str {
        "cost_volume"
    }

    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (fa, fb) = (inputs[0], inputs[1]);
        let (d, h, w) = (fa.shape()[0], fa.shape()[1], fa.shape()[2]);
        let hw = h * w;
        let gd = grad.data();
        let fad = fa.data();
        let fbd = fb.data();
        let scale = self.scale;

        let grad_a = needs[0].then(|| {
            let mut ga = Tensor::zeros(fa.shape());
            {
                let dst = ga.data_mut();
                for src in 0..hw {
                    let grow = &gd[src * hw..(src + 1) * hw];
                    for c in 0..d {
                        let frow = &fbd[c * hw..(c + 1) * hw];
                        let mut acc = E::zero();
                        for (gv, fv) in grow.iter().zip(frow) {
                            acc = acc + *gv * *fv;
                        }
                        dst[c * hw + src] = acc * scale;
                    }
                }
            }
            ga
        });

        let grad_b = needs[1].then(|| {
            let mut gb = Tensor::zeros(fb.shape());
            {
                let dst = gb.data_mut();
                for src in 0..hw {
                    let grow = &gd[src * hw..(src + 1) * hw];
                    for c in 0..d {
                        let av = fad[c * hw + src] * scale;
                        let brow = &mut dst[c * hw..(c + 1) * hw];
                        for (bv, gv) in brow.iter_mut().zip(grow) {
                            *bv = *bv + av * *gv;
                        }
                    }
                }
            }
            gb
        });

        vec![grad_a, grad_b]
    }
}

/// All-pairs dot products between `f_src` and `f_dst` feature maps of
/// shape `[D, H, W]`, scaled by `scale_factor`.
pub fn build_cost_volume<E: Element>(
    g: &mut Graph<E>,
    f_src: NodeId,
    f_dst: NodeId,
    scale_factor: f64,
) -> Result<NodeId> {
    let sa = g.shape(f_src).to_vec();
    let sb = g.shape(f_dst).to_vec();
    if sa.len() != 3 || sa != sb {
        return Err(FlowError::shape(
            "cost_volume",
            format!("{:?} vs {:?}", sa, sb),
        ));
    }
    let (d, h, w) = (sa[0], sa[1], sa[2]);
    let hw = h * w;
    let scale = E::from_f64(scale_factor);
    let fad = g.value(f_src).data();
    let fbd = g.value(f_dst).data();

    let mut out = Tensor::zeros(&[h, w, h, w]);
    {
        let od = out.data_mut();
        for src in 0..hw {
            let orow = &mut od[src * hw..(src + 1) * hw];
            for c in 0..d {
                let av = fad[c * hw + src] * scale;
                let brow = &fbd[c * hw..(c + 1) * hw];
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov = *ov + av * *bv;
                }
            }
        }
    }
    Ok(g.push_op(out, vec![f_src, f_dst], Box::new(CorrVolumeKernel { scale })))
}

/// Pool the trailing (target) axes of a volume into `levels` levels;
/// level 0 is the volume itself.
pub fn build_pyramid<E: Element>(
    g: &mut Graph<E>,
    volume: NodeId,
    levels: usize,
    scale_factor: f64,
) -> Result<CostVolumePyramid> {
    let shape = g.shape(volume).to_vec();
    if shape.len() != 4 {
        return Err(FlowError::shape("build_pyramid", format!("{:?}", shape)));
    }
    if levels == 0 {
        return Err(FlowError::Config("pyramid needs at least one level".into()));
    }
    let div = 1usize << (levels - 1);
    if shape[2] % div != 0 || shape[3] % div != 0 {
        return Err(FlowError::shape(
            "build_pyramid",
            format!(
                "target dims {}x{} not divisible by 2^{}",
                shape[2],
                shape[3],
                levels - 1
            ),
        ));
    }
    let mut ids = vec![volume];
    for _ in 1..levels {
        let prev = *ids.last().unwrap();
        ids.push(ops::avg_pool2(g, prev)?);
    }
    Ok(CostVolumePyramid {
        levels: ids,
        scale_factor,
    })
}
