//! Grid sampling of motion features from a cost-volume pyramid.
//!
//! For every source pixel the sampler reads a `(2r+1) x (2r+1)` grid of
//! correlation values around the flow-displaced correspondence, at every
//! pyramid level, producing the motion feature consumed by the decoder.
//! A sample whose whole bilinear footprint falls outside the (pooled)
//! volume carries no matching evidence: it reads exactly 0 and is flagged
//! invalid. Invalidity is decided geometrically from the current flow, not
//! by testing values against zero, so a genuine zero correlation is never
//! mistaken for a vanished entry.

use crate::costvolume::CostVolumePyramid;
use crate::element::Element;
use crate::error::{FlowError, Result};
use crate::graph::{Graph, NodeId, OpKernel};
use crate::ops::{self, Tap};
use crate::tensor::{Mask, Tensor};

/// Sampling grid configuration: the grid half-width `radius` (grid side is
/// `2*radius + 1`) and how many pyramid levels to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LookupConfig {
    pub radius: usize,
    pub levels: usize,
}

impl Default for LookupConfig {
    fn default() -> Self {
        LookupConfig {
            radius: 3,
            levels: 4,
        }
    }
}

impl LookupConfig {
    pub fn grid_size(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    pub fn channels(&self) -> usize {
        self.levels * self.grid_size()
    }
}

/// Which frame pair a flow or motion feature refers to, anchored at the
/// current frame `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowDirection {
    /// t -> t+1
    ToNext,
    /// t -> t-n
    ToPast(usize),
}

/// Per-entry validity of a motion feature, `[levels*(2r+1)^2, H, W]`.
#[derive(Clone, Debug)]
pub struct ValidityMask {
    pub valid: Mask,
    pub levels: usize,
    pub grid: usize,
}

impl ValidityMask {
    /// Fraction of valid entries over the whole feature.
    pub fn nzr(&self) -> f64 {
        self.valid.fraction_true()
    }

    /// Fraction of valid entries per pyramid level (level 0 first).
    pub fn nzr_per_level(&self) -> Vec<f64> {
        let per = self.grid * self.valid.shape()[1] * self.valid.shape()[2];
        (0..self.levels)
            .map(|l| {
                let block = &self.valid.data()[l * per..(l + 1) * per];
                block.iter().filter(|&&b| b).count() as f64 / per as f64
            })
            .collect()
    }

    /// The support of invalid entries: the complement of `valid`.
    pub fn invalid_support(&self) -> Mask {
        self.valid.not()
    }
}

/// Motion feature node plus its validity and direction tag.
#[derive(Clone, Debug)]
pub struct MotionFeature {
    pub node: NodeId,
    pub validity: ValidityMask,
    pub direction: FlowDirection,
}

struct CorrLookupKernel {
    radius: usize,
    level: usize,
}

fn lookup_level<E: Element>(
    volume: &Tensor<E>,
    flow: &Tensor<E>,
    radius: usize,
    level: usize,
) -> (Tensor<E>, Mask) {
    let (h, w) = (volume.shape()[0], volume.shape()[1]);
    let (hl, wl) = (volume.shape()[2], volume.shape()[3]);
    let side = 2 * radius + 1;
    let channels = side * side;
    let inv_scale = E::from_f64(1.0 / (1u64 << level) as f64);
    let fd = flow.data();
    let vd = volume.data();

    let mut out = Tensor::zeros(&[channels, h, w]);
    let mut mask = Mask::full(&[channels, h, w], false);
    {
        let od = out.data_mut();
        let md = mask.data_mut();
        for i in 0..h {
            for j in 0..w {
                let px = i * w + j;
                let cx = (E::from_usize(j) + fd[px]) * inv_scale;
                let cy = (E::from_usize(i) + fd[h * w + px]) * inv_scale;
                let slice = &vd[px * hl * wl..(px + 1) * hl * wl];
                let mut ch = 0usize;
                for dy in 0..side {
                    let oy = E::from_f64(dy as f64 - radius as f64);
                    for dx in 0..side {
                        let ox = E::from_f64(dx as f64 - radius as f64);
                        let tap = Tap::new(cx + ox, cy + oy, wl, hl);
                        if tap.in_bounds {
                            let mut acc = E::zero();
                            for (iy, ix, wgt, _, _) in tap.corners() {
                                if iy >= 0 && ix >= 0 && iy < hl as i64 && ix < wl as i64 {
                                    acc = acc + wgt * slice[iy as usize * wl + ix as usize];
                                }
                            }
                            od[ch * h * w + px] = acc;
                            md[ch * h * w + px] = true;
                        }
                        ch += 1;
                    }
                }
            }
        }
    }
    (out, mask)
}

impl<E: Element> OpKernel<E> for CorrLookupKernel {
    fn name(&self) -> &'static str {
        "corr_lookup"
    }

    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (volume, flow) = (inputs[0], inputs[1]);
        let (h, w) = (volume.shape()[0], volume.shape()[1]);
        let (hl, wl) = (volume.shape()[2], volume.shape()[3]);
        let side = 2 * self.radius + 1;
        let inv_scale = E::from_f64(1.0 / (1u64 << self.level) as f64);
        let fd = flow.data();
        let vd = volume.data();
        let gd = grad.data();

        let mut gvol = needs[0].then(|| Tensor::zeros(volume.shape()));
        let mut gflow = needs[1].then(|| Tensor::zeros(flow.shape()));

        for i in 0..h {
            for j in 0..w {
                let px = i * w + j;
                let cx = (E::from_usize(j) + fd[px]) * inv_scale;
                let cy = (E::from_usize(i) + fd[h * w + px]) * inv_scale;
                let base = px * hl * wl;
                let mut dcx = E::zero();
                let mut dcy = E::zero();
                let mut ch = 0usize;
                for dy in 0..side {
                    let oy = E::from_f64(dy as f64 - self.radius as f64);
                    for dx in 0..side {
                        let ox = E::from_f64(dx as f64 - self.radius as f64);
                        let tap = Tap::new(cx + ox, cy + oy, wl, hl);
                        if tap.in_bounds {
                            let gv = gd[ch * h * w + px];
                            for (iy, ix, wgt, dwx, dwy) in tap.corners() {
                                if iy >= 0 && ix >= 0 && iy < hl as i64 && ix < wl as i64 {
                                    let off = base + iy as usize * wl + ix as usize;
                                    if let Some(gvol) = gvol.as_mut() {
                                        let d = gvol.data_mut();
                                        d[off] = d[off] + gv * wgt;
                                    }
                                    let v = vd[off];
                                    dcx = dcx + gv * v * dwx;
                                    dcy = dcy + gv * v * dwy;
                                }
                            }
                        }
                        ch += 1;
                    }
                }
                if let Some(gflow) = gflow.as_mut() {
                    let d = gflow.data_mut();
                    d[px] = d[px] + dcx * inv_scale;
                    d[h * w + px] = d[h * w + px] + dcy * inv_scale;
                }
            }
        }
        vec![gvol, gflow]
    }
}

/// Sample the motion feature for every pixel: at each level `l` and grid
/// offset `(dy, dx)` the pyramid slice of pixel `x` is read bilinearly at
/// `(x + flow(x)) / 2^l + (dx, dy)`. Channels are ordered level-major and
/// then row-major over the grid. Differentiable w.r.t. the pyramid and the
/// flow on valid entries.
pub fn lookup_motion_feature<E: Element>(
    g: &mut Graph<E>,
    pyramid: &CostVolumePyramid,
    flow: NodeId,
    cfg: &LookupConfig,
    direction: FlowDirection,
) -> Result<MotionFeature> {
    if cfg.levels == 0 || cfg.levels > pyramid.levels.len() {
        return Err(FlowError::Config(format!(
            "lookup wants {} levels, pyramid has {}",
            cfg.levels,
            pyramid.levels.len()
        )));
    }
    let fs = g.shape(flow).to_vec();
    let vs = g.shape(pyramid.levels[0]).to_vec();
    if fs.len() != 3 || fs[0] != 2 {
        return Err(FlowError::shape("lookup", format!("flow {:?}", fs)));
    }
    if vs[0] != fs[1] || vs[1] != fs[2] {
        return Err(FlowError::shape(
            "lookup",
            format!("volume {:?} vs flow {:?}", vs, fs),
        ));
    }

    let mut level_nodes = Vec::with_capacity(cfg.levels);
    let mut level_masks = Vec::with_capacity(cfg.levels);
    for (level, &vol) in pyramid.levels[..cfg.levels].iter().enumerate() {
        let (value, mask) = lookup_level(g.value(vol), g.value(flow), cfg.radius, level);
        let id = g.push_op(
            value,
            vec![vol, flow],
            Box::new(CorrLookupKernel {
                radius: cfg.radius,
                level,
            }),
        );
        level_nodes.push(id);
        level_masks.push(mask);
    }
    let node = if level_nodes.len() == 1 {
        level_nodes[0]
    } else {
        ops::concat(g, 0, &level_nodes)?
    };

    let (h, w) = (fs[1], fs[2]);
    let mut data = Vec::with_capacity(cfg.channels() * h * w);
    for m in &level_masks {
        data.extend_from_slice(m.data());
    }
    let valid = Mask::new(vec![cfg.channels(), h, w], data)?;
    Ok(MotionFeature {
        node,
        validity: ValidityMask {
            valid,
            levels: cfg.levels,
            grid: cfg.grid_size(),
        },
        direction,
    })
}

/// The support of invalid entries of a validity mask.
pub fn invalid_support(mask: &ValidityMask) -> Mask {
    mask.invalid_support()
}

/// Non-zero element ratio: the fraction of valid entries.
pub fn nzr(mask: &ValidityMask) -> f64 {
    mask.nzr()
}

/// Non-zero element ratio grouped by pyramid level.
pub fn nzr_per_level(mask: &ValidityMask) -> Vec<f64> {
    mask.nzr_per_level()
}

/// Value-based non-zero ratios per level, for features whose invalid
/// entries may have been refilled; pairs with [`nzr_per_level`] which
/// counts geometric validity on the raw lookup.
pub fn nonzero_ratio_per_level<E: Element>(
    feature: &Tensor<E>,
    levels: usize,
    grid: usize,
) -> Vec<f64> {
    let per = grid * feature.shape()[1] * feature.shape()[2];
    (0..levels)
        .map(|l| {
            let block = &feature.data()[l * per..(l + 1) * per];
            block.iter().filter(|v| **v != E::zero()).count() as f64 / per as f64
        })
        .collect()
}
