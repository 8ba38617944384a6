//! Recovery of vanished motion-feature entries from earlier frames.
//!
//! Motion between nearby frames is highly consistent, so an entry of the
//! forward motion feature that vanished (its sampling footprint left the
//! volume) can be approximated from the inverse motion features of up to
//! `N` history frames, blended per pixel by learned coefficients over a
//! small spatial window. Entries outside the invalid support are passed
//! through bit-exactly.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{FlowError, Result};
use crate::graph::{Graph, NodeId, OpKernel};
use crate::lookup::MotionFeature;
use crate::ops;
use crate::tensor::{Mask, Tensor};

/// Recovery configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MfrConfig {
    /// Number of history frames N.
    pub history_frames: usize,
    /// Window size: the number of local patch offsets (1, 9, 25, ...).
    pub window: usize,
    /// Keep the literal 1/(window * N) prefactor on recovered entries.
    /// When false the blend is a plain convex combination.
    pub literal_prefactor: bool,
    /// Hidden width of the two-layer coefficient network.
    pub hidden: usize,
    /// Share the coefficient network weights across history frames.
    pub shared_weights: bool,
    /// Normalize coefficients per history frame over the window only,
    /// instead of jointly over all (frame, offset) pairs.
    pub spatial_softmax: bool,
}

impl Default for MfrConfig {
    fn default() -> Self {
        MfrConfig {
            history_frames: 2,
            window: 1,
            literal_prefactor: true,
            hidden: 64,
            shared_weights: true,
            spatial_softmax: false,
        }
    }
}

impl MfrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_frames == 0 {
            return Err(FlowError::Config("history_frames must be >= 1".into()));
        }
        let side = self.window_side()?;
        let _ = side;
        if self.hidden == 0 {
            return Err(FlowError::Config("coefficient hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// Side length of the centered square patch; `window` must be an odd
    /// square (1, 9, 25, ...).
    pub fn window_side(&self) -> Result<usize> {
        let side = (self.window as f64).sqrt().round() as usize;
        if side * side != self.window || side % 2 == 0 {
            return Err(FlowError::Config(format!(
                "window {} is not an odd centered square",
                self.window
            )));
        }
        Ok(side)
    }

    /// Row-major (dy, dx) offsets of the centered patch.
    pub fn patch_offsets(&self) -> Result<Vec<(i64, i64)>> {
        let side = self.window_side()? as i64;
        let r = side / 2;
        let mut out = Vec::with_capacity(self.window);
        for dy in -r..=r {
            for dx in -r..=r {
                out.push((dy, dx));
            }
        }
        Ok(out)
    }

    pub fn prefactor(&self) -> f64 {
        if self.literal_prefactor {
            1.0 / (self.window * self.history_frames) as f64
        } else {
            1.0
        }
    }
}

/// Graph bindings of one two-layer coefficient network (3x3 convs).
#[derive(Clone, Copy, Debug)]
pub struct CoefficientNet {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
}

/// Learned blend weights `[N, window, H, W]`, normalized per pixel.
#[derive(Clone, Debug)]
pub struct CoefficientField {
    pub node: NodeId,
    pub history_frames: usize,
    pub window: usize,
}

/// Patch-offset validity per pixel, `[window, H, W]`: offsets whose target
/// pixel leaves the feature map are excluded from the softmax mass.
fn patch_mask(h: usize, w: usize, offsets: &[(i64, i64)]) -> Mask {
    let mut mask = Mask::full(&[offsets.len(), h, w], false);
    {
        let d = mask.data_mut();
        for (p, &(dy, dx)) in offsets.iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    let (y, x) = (i as i64 + dy, j as i64 + dx);
                    if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 {
                        d[(p * h + i) * w + j] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Run each history motion feature through its (shared) two-layer network
/// and normalize the stacked logits into blend coefficients.
pub fn coefficient_forward<E: Element>(
    g: &mut Graph<E>,
    nets: &[CoefficientNet],
    histories: &[&MotionFeature],
    cfg: &MfrConfig,
) -> Result<CoefficientField> {
    cfg.validate()?;
    let n = cfg.history_frames;
    if histories.len() != n {
        return Err(FlowError::Config(format!(
            "expected {} history features, got {}",
            n,
            histories.len()
        )));
    }
    if nets.len() != if cfg.shared_weights { 1 } else { n } {
        return Err(FlowError::Config(format!(
            "expected {} coefficient nets, got {}",
            if cfg.shared_weights { 1 } else { n },
            nets.len()
        )));
    }
    let shape0 = g.shape(histories[0].node).to_vec();
    for hist in histories {
        if g.shape(hist.node) != shape0.as_slice() {
            return Err(FlowError::shape(
                "coefficient_forward",
                "history shapes differ".to_string(),
            ));
        }
    }
    let (h, w) = (shape0[1], shape0[2]);

    let mut logits = Vec::with_capacity(n);
    for (k, hist) in histories.iter().enumerate() {
        let net = &nets[if cfg.shared_weights { 0 } else { k }];
        let mid = ops::conv2d(g, hist.node, net.conv1_w, net.conv1_b, 1, 1)?;
        let act = ops::relu(g, mid);
        let out = ops::conv2d(g, act, net.conv2_w, net.conv2_b, 1, 1)?;
        logits.push(ops::reshape(g, out, &[1, cfg.window, h, w])?);
    }
    let stacked = if logits.len() == 1 {
        logits[0]
    } else {
        ops::concat(g, 0, &logits)?
    };

    let offsets = cfg.patch_offsets()?;
    let base = patch_mask(h, w, &offsets);
    let alpha = if cfg.spatial_softmax {
        // per-frame normalization over the window axis
        let mut mask_data = Vec::with_capacity(n * cfg.window * h * w);
        for _ in 0..n {
            mask_data.extend_from_slice(base.data());
        }
        let mask = Arc::new(Mask::new(vec![n, cfg.window, h, w], mask_data)?);
        ops::softmax_masked(g, stacked, &[1], &mask)?
    } else {
        // joint normalization over every (frame, offset) pair
        let flat = ops::reshape(g, stacked, &[n * cfg.window, h, w])?;
        let mut mask_data = Vec::with_capacity(n * cfg.window * h * w);
        for _ in 0..n {
            mask_data.extend_from_slice(base.data());
        }
        let mask = Arc::new(Mask::new(vec![n * cfg.window, h, w], mask_data)?);
        let sm = ops::softmax_masked(g, flat, &[0], &mask)?;
        ops::reshape(g, sm, &[n, cfg.window, h, w])?
    };

    Ok(CoefficientField {
        node: alpha,
        history_frames: n,
        window: cfg.window,
    })
}

struct RecoverKernel<E> {
    support: Arc<Mask>,
    offsets: Arc<Vec<(i64, i64)>>,
    prefactor: E,
    histories: usize,
}

impl<E: Element> OpKernel<E> for RecoverKernel<E> {
    fn name(&self) -> &'static str {
        "recover"
    }

    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let m_fwd = inputs[0];
        let alpha = inputs[1];
        let hists = &inputs[2..];
        let (c, h, w) = (m_fwd.shape()[0], m_fwd.shape()[1], m_fwd.shape()[2]);
        let hw = h * w;
        let window = self.offsets.len();
        let sup = self.support.data();
        let gd = grad.data();
        let pf = self.prefactor;

        let grad_fwd = needs[0].then(|| {
            Tensor::from_fn(m_fwd.shape(), |i| if sup[i] { E::zero() } else { gd[i] })
        });

        let mut grad_alpha = needs[1].then(|| Tensor::zeros(alpha.shape()));
        let mut grad_hists: Vec<Option<Tensor<E>>> = (0..self.histories)
            .map(|k| needs[2 + k].then(|| Tensor::zeros(hists[k].shape())))
            .collect();

        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let off = ch * hw + i * w + j;
                    if !sup[off] {
                        continue;
                    }
                    let gv = gd[off] * pf;
                    for (p, &(dy, dx)) in self.offsets.iter().enumerate() {
                        let (y, x) = (i as i64 + dy, j as i64 + dx);
                        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                            continue;
                        }
                        let src = ch * hw + y as usize * w + x as usize;
                        for n in 0..self.histories {
                            let a = alpha.data()[(n * window + p) * hw + i * w + j];
                            if let Some(ga) = grad_alpha.as_mut() {
                                let d = ga.data_mut();
                                let ai = (n * window + p) * hw + i * w + j;
                                d[ai] = d[ai] + gv * hists[n].data()[src];
                            }
                            if let Some(gh) = grad_hists[n].as_mut() {
                                let d = gh.data_mut();
                                d[src] = d[src] + gv * a;
                            }
                        }
                    }
                }
            }
        }

        let mut out = vec![grad_fwd, grad_alpha];
        out.extend(grad_hists);
        out
    }
}

/// Fill the invalid support of `m_fwd` from history features blended by
/// `alpha`; entries outside the support are copied bit-exactly.
///
/// A recovered entry at pixel `x`, channel `c` is
/// `pf * sum_p sum_n alpha[n,p,x] * hist_n[c, x + offset_p]` over
/// in-bounds patch offsets, with `pf = 1/(window*N)` when the literal
/// prefactor is enabled and 1 otherwise.
pub fn recover<E: Element>(
    g: &mut Graph<E>,
    m_fwd: &MotionFeature,
    support: &Mask,
    histories: &[&MotionFeature],
    alpha: &CoefficientField,
    cfg: &MfrConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let shape = g.shape(m_fwd.node).to_vec();
    if support.shape() != shape.as_slice() {
        return Err(FlowError::shape(
            "recover",
            format!("support {:?} vs feature {:?}", support.shape(), shape),
        ));
    }
    if histories.len() != cfg.history_frames {
        return Err(FlowError::Config(format!(
            "expected {} histories, got {}",
            cfg.history_frames,
            histories.len()
        )));
    }
    for hist in histories {
        if g.shape(hist.node) != shape.as_slice() {
            return Err(FlowError::shape("recover", "history shape mismatch".to_string()));
        }
    }
    let asha = g.shape(alpha.node).to_vec();
    let (h, w) = (shape[1], shape[2]);
    if asha != [cfg.history_frames, cfg.window, h, w] {
        return Err(FlowError::shape(
            "recover",
            format!("alpha {:?} vs expected [{},{},{},{}]", asha, cfg.history_frames, cfg.window, h, w),
        ));
    }

    let offsets = Arc::new(cfg.patch_offsets()?);
    let pf = E::from_f64(cfg.prefactor());
    let c = shape[0];
    let hw = h * w;

    let mut out = g.value(m_fwd.node).clone();
    {
        let alpha_v = g.value(alpha.node).clone();
        let hist_vals: Vec<Tensor<E>> = histories.iter().map(|m| g.value(m.node).clone()).collect();
        let od = out.data_mut();
        let sup = support.data();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let off = ch * hw + i * w + j;
                    if !sup[off] {
                        continue;
                    }
                    let mut acc = E::zero();
                    for (p, &(dy, dx)) in offsets.iter().enumerate() {
                        let (y, x) = (i as i64 + dy, j as i64 + dx);
                        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                            continue;
                        }
                        let src = ch * hw + y as usize * w + x as usize;
                        for (n, hist) in hist_vals.iter().enumerate() {
                            let a = alpha_v.data()[(n * cfg.window + p) * hw + i * w + j];
                            acc = acc + a * hist.data()[src];
                        }
                    }
                    od[off] = pf * acc;
                }
            }
        }
    }

    let mut input_ids = vec![m_fwd.node, alpha.node];
    input_ids.extend(histories.iter().map(|m| m.node));
    Ok(g.push_op(
        out,
        input_ids,
        Box::new(RecoverKernel {
            support: Arc::new(support.clone()),
            offsets,
            prefactor: pf,
            histories: cfg.history_frames,
        }),
    ))
}
