use std::sync::Arc;

use crate::element::Element;
use crate::error::{FlowError, Result};
use crate::graph::{Graph, NodeId, OpKernel};
use crate::ops::{axis_offsets, check_axes};
use crate::tensor::{Mask, Tensor};

fn ceil_div(a: i64, b: i64) -> i64 {
    (a + b - 1).div_euclid(b)
}

/// Valid output range along one spatial axis so that the tapped input
/// index `o*stride + k - pad` stays inside `[0, in_len)`.
fn tap_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = ceil_div(pad as i64 - k as i64, s).max(0);
    let hi = ((in_len as i64 - 1 - k as i64 + pad as i64).div_euclid(s) + 1)
        .clamp(0, out_len as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub(crate) fn conv2d_out_dim(in_len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let n = in_len as i64 + 2 * pad as i64 - k as i64;
    if n < 0 {
        return None;
    }
    Some((n / stride as i64) as usize + 1)
}

struct Conv2dKernel {
    stride: usize,
    padding: usize,
}

impl Conv2dKernel {
    #[allow(clippy::too_many_arguments)]
    fn accumulate<E: Element>(
        out: &mut [E],
        x: &[E],
        w: &[E],
        bias: Option<&[E]>,
        xs: (usize, usize, usize),
        ws: (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) {
        let (cin, h, wid) = xs;
        let (cout, kh, kw) = ws;
        let hout = conv2d_out_dim(h, kh, stride, pad).unwrap();
        let wout = conv2d_out_dim(wid, kw, stride, pad).unwrap();
        if let Some(b) = bias {
            for o in 0..cout {
                out[o * hout * wout..(o + 1) * hout * wout].fill(b[o]);
            }
        }
        for o in 0..cout {
            for c in 0..cin {
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(hout, h, ky, stride, pad);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = tap_range(wout, wid, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = w[((o * cin + c) * kh + ky) * kw + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = &x[(c * h + iy) * wid..(c * h + iy + 1) * wid];
                            let orow =
                                &mut out[(o * hout + oy) * wout..(o * hout + oy + 1) * wout];
                            if stride == 1 {
                                let base = ox_lo + kx - pad;
                                let xseg = &xrow[base..base + (ox_hi - ox_lo)];
                                for (ov, &xv) in orow[ox_lo..ox_hi].iter_mut().zip(xseg) {
                                    *ov = *ov + wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    orow[ox] = orow[ox] + wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<E: Element> OpKernel<E> for Conv2dKernel {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (hout, wout) = (grad.shape()[1], grad.shape()[2]);
        let (stride, pad) = (self.stride, self.padding);
        let gd = grad.data();

        let grad_bias = needs[2].then(|| {
            Tensor::from_fn(&[cout], |o| {
                let mut acc = E::zero();
                for &v in &gd[o * hout * wout..(o + 1) * hout * wout] {
                    acc = acc + v;
                }
                acc
            })
        });

        let grad_w = needs[1].then(|| {
            let mut gw = Tensor::zeros(w.shape());
            {
                let gwd = gw.data_mut();
                let xd = x.data();
                for o in 0..cout {
                    for c in 0..cin {
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = tap_range(hout, h, ky, stride, pad);
                            for kx in 0..kw {
                                let (ox_lo, ox_hi) = tap_range(wout, wid, kx, stride, pad);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let mut acc = E::zero();
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let xrow = &xd[(c * h + iy) * wid..];
                                    let grow = &gd[(o * hout + oy) * wout..];
                                    if stride == 1 {
                                        let base = ox_lo + kx - pad;
                                        for (gi, &gv) in grow[ox_lo..ox_hi].iter().enumerate() {
                                            acc = acc + gv * xrow[base + gi];
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi {
                                            acc = acc + grow[ox] * xrow[ox * stride + kx - pad];
                                        }
                                    }
                                }
                                gwd[((o * cin + c) * kh + ky) * kw + kx] =
                                    gwd[((o * cin + c) * kh + ky) * kw + kx] + acc;
                            }
                        }
                    }
                }
            }
            gw
        });

        let grad_x = needs[0].then(|| {
            let mut gx = Tensor::zeros(x.shape());
            {
                let gxd = gx.data_mut();
                let wd = w.data();
                for o in 0..cout {
                    for c in 0..cin {
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = tap_range(hout, h, ky, stride, pad);
                            for kx in 0..kw {
                                let (ox_lo, ox_hi) = tap_range(wout, wid, kx, stride, pad);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let wv = wd[((o * cin + c) * kh + ky) * kw + kx];
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let xrow = &mut gxd[(c * h + iy) * wid..(c * h + iy + 1) * wid];
                                    let grow = &gd[(o * hout + oy) * wout..];
                                    if stride == 1 {
                                        let base = ox_lo + kx - pad;
                                        for (gi, &gv) in grow[ox_lo..ox_hi].iter().enumerate() {
                                            xrow[base + gi] = xrow[base + gi] + wv * gv;
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi {
                                            let ix = ox * stride + kx - pad;
                                            xrow[ix] = xrow[ix] + wv * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gx
        });

        vec![grad_x, grad_w, grad_bias]
    }
}

/// 2-D cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,kh,kw]`
/// plus per-channel `bias: [C_out]`.
pub fn conv2d<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    w: NodeId,
    bias: NodeId,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    let bs = g.shape(bias).to_vec();
    if xs.len() != 3 || ws.len() != 4 {
        return Err(FlowError::shape(
            "conv2d",
            format!("input {:?}, kernel {:?}", xs, ws),
        ));
    }
    if stride == 0 {
        return Err(FlowError::Config("conv2d stride must be >= 1".into()));
    }
    if ws[1] != xs[0] {
        return Err(FlowError::shape(
            "conv2d",
            format!("kernel wants {} input channels, input has {}", ws[1], xs[0]),
        ));
    }
    if bs != [ws[0]] {
        return Err(FlowError::shape(
            "conv2d",
            format!("bias {:?} vs {} output channels", bs, ws[0]),
        ));
    }
    let hout = conv2d_out_dim(xs[1], ws[2], stride, padding);
    let wout = conv2d_out_dim(xs[2], ws[3], stride, padding);
    let (Some(hout), Some(wout)) = (hout, wout) else {
        return Err(FlowError::shape(
            "conv2d",
            format!("kernel {:?} larger than padded input {:?}", ws, xs),
        ));
    };
    if hout == 0 || wout == 0 {
        return Err(FlowError::shape("conv2d", "empty output"));
    }

    let mut out = Tensor::zeros(&[ws[0], hout, wout]);
    Conv2dKernel::accumulate(
        out.data_mut(),
        g.value(x).data(),
        g.value(w).data(),
        Some(g.value(bias).data()),
        (xs[0], xs[1], xs[2]),
        (ws[0], ws[2], ws[3]),
        stride,
        padding,
    );
    Ok(g.push_op(
        out,
        vec![x, w, bias],
        Box::new(Conv2dKernel { stride, padding }),
    ))
}

struct SoftmaxKernel {
    axes: Vec<usize>,
}

impl<E: Element> OpKernel<E> for SoftmaxKernel {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (outer, inner) = axis_offsets(out.shape(), &self.axes);
        let gd = grad.data();
        let od = out.data();
        let mut gx = Tensor::zeros(out.shape());
        {
            let dst = gx.data_mut();
            for &ooff in &outer {
                let mut dot = E::zero();
                for &ioff in &inner {
                    dot = dot + gd[ooff + ioff] * od[ooff + ioff];
                }
                for &ioff in &inner {
                    let y = od[ooff + ioff];
                    dst[ooff + ioff] = y * (gd[ooff + ioff] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Numerically stabilized softmax over the given axis set.
pub fn softmax<E: Element>(g: &mut Graph<E>, x: NodeId, axes: &[usize]) -> Result<NodeId> {
    softmax_impl(g, x, axes, None)
}

/// Softmax restricted to `mask`-true entries; masked entries get 0 and do
/// not contribute normalization mass.
pub fn softmax_masked<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    axes: &[usize],
    mask: &Arc<Mask>,
) -> Result<NodeId> {
    if mask.shape() != g.shape(x) {
        return Err(FlowError::shape(
            "softmax",
            format!("mask {:?} vs value {:?}", mask.shape(), g.shape(x)),
        ));
    }
    softmax_impl(g, x, axes, Some(mask))
}

fn softmax_impl<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    axes: &[usize],
    mask: Option<&Arc<Mask>>,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    check_axes::<E>("softmax", &shape, axes)?;
    let (outer, inner) = axis_offsets(&shape, axes);
    let xd = g.value(x).data();
    let keep = |off: usize| mask.as_ref().map_or(true, |m| m.data()[off]);

    let mut out = Tensor::zeros(&shape);
    {
        let od = out.data_mut();
        for &ooff in &outer {
            let mut max = E::neg_infinity();
            for &ioff in &inner {
                if keep(ooff + ioff) && xd[ooff + ioff] > max {
                    max = xd[ooff + ioff];
                }
            }
            if max == E::neg_infinity() {
                continue; // fully masked group stays zero
            }
            let mut sum = E::zero();
            for &ioff in &inner {
                if keep(ooff + ioff) {
                    let e = (xd[ooff + ioff] - max).exp();
                    od[ooff + ioff] = e;
                    sum = sum + e;
                }
            }
            for &ioff in &inner {
                od[ooff + ioff] = od[ooff + ioff] / sum;
            }
        }
    }
    // Masked entries emit exactly 0, so their gradient is already 0 in
    // the standard softmax backward; the kernel does not need the mask.
    Ok(g.push_op(
        out,
        vec![x],
        Box::new(SoftmaxKernel {
            axes: axes.to_vec(),
        }),
    ))
}

struct AvgPool2Kernel;

impl<E: Element> OpKernel<E> for AvgPool2Kernel {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let in_shape = inputs[0].shape();
        let rank = in_shape.len();
        let (h, w) = (in_shape[rank - 2], in_shape[rank - 1]);
        let lead: usize = in_shape[..rank - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let quarter = E::from_f64(0.25);
        let gd = grad.data();
        let mut gx = Tensor::zeros(in_shape);
        {
            let dst = gx.data_mut();
            for b in 0..lead {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gd[(b * ho + oy) * wo + ox] * quarter;
                        let base = (b * h + 2 * oy) * w + 2 * ox;
                        dst[base] = gv;
                        dst[base + 1] = gv;
                        dst[base + w] = gv;
                        dst[base + w + 1] = gv;
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

/// 2x2 mean pooling over the two trailing axes, which must be even.
pub fn avg_pool2<E: Element>(g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    if rank < 2 {
        return Err(FlowError::shape("avg_pool2", format!("rank {} < 2", rank)));
    }
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(FlowError::shape(
            "avg_pool2",
            format!("trailing dims {}x{} not even", h, w),
        ));
    }
    let lead: usize = shape[..rank - 2].iter().product();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let xd = g.value(x).data();
    let mut out_shape = shape.clone();
    out_shape[rank - 2] = ho;
    out_shape[rank - 1] = wo;
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        for b in 0..lead {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = (b * h + 2 * oy) * w + 2 * ox;
                    od[(b * ho + oy) * wo + ox] =
                        (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter;
                }
            }
        }
    }
    Ok(g.push_op(out, vec![x], Box::new(AvgPool2Kernel)))
}

/// One axis of bilinear upsampling: output index -> (i0, i1, frac).
fn upsample_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else if src >= (in_len - 1) as f64 {
                (in_len - 1, in_len - 1, 0.0)
            } else {
                let i0 = src.floor() as usize;
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

struct Upsample2dKernel {
    factor: usize,
}

impl<E: Element> OpKernel<E> for Upsample2dKernel {
    fn name(&self) -> &'static str {
        "upsample2d"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let in_shape = inputs[0].shape();
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let ytaps = upsample_taps(h, self.factor);
        let xtaps = upsample_taps(w, self.factor);
        let (ho, wo) = (h * self.factor, w * self.factor);
        let gd = grad.data();
        let mut gx = Tensor::zeros(in_shape);
        {
            let dst = gx.data_mut();
            for ch in 0..c {
                for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                    for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                        let gv = gd[(ch * ho + oy) * wo + ox];
                        let (ty, tx) = (E::from_f64(ty), E::from_f64(tx));
                        let one = E::one();
                        dst[(ch * h + y0) * w + x0] =
                            dst[(ch * h + y0) * w + x0] + gv * (one - ty) * (one - tx);
                        dst[(ch * h + y0) * w + x1] =
                            dst[(ch * h + y0) * w + x1] + gv * (one - ty) * tx;
                        dst[(ch * h + y1) * w + x0] =
                            dst[(ch * h + y1) * w + x0] + gv * ty * (one - tx);
                        dst[(ch * h + y1) * w + x1] = dst[(ch * h + y1) * w + x1] + gv * ty * tx;
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Bilinear upsampling of `[C,H,W]` by an integer factor.
pub fn upsample2d<E: Element>(g: &mut Graph<E>, x: NodeId, factor: usize) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(FlowError::shape("upsample2d", format!("{:?}", shape)));
    }
    if factor == 0 {
        return Err(FlowError::Config("upsample factor must be >= 1".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let ytaps = upsample_taps(h, factor);
    let xtaps = upsample_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let xd = g.value(x).data();
    let mut out = Tensor::zeros(&[c, ho, wo]);
    {
        let od = out.data_mut();
        for ch in 0..c {
            for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                    let (ty, tx) = (E::from_f64(ty), E::from_f64(tx));
                    let one = E::one();
                    let v00 = xd[(ch * h + y0) * w + x0];
                    let v01 = xd[(ch * h + y0) * w + x1];
                    let v10 = xd[(ch * h + y1) * w + x0];
                    let v11 = xd[(ch * h + y1) * w + x1];
                    od[(ch * ho + oy) * wo + ox] = (one - ty) * ((one - tx) * v00 + tx * v01)
                        + ty * ((one - tx) * v10 + tx * v11);
                }
            }
        }
    }
    Ok(g.push_op(out, vec![x], Box::new(Upsample2dKernel { factor })))
}

/// Corner data for one bilinear sample with zero padding. A tap is
/// in bounds when at least one of its four corners lands inside the grid,
/// i.e. the footprint has not left the volume entirely.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<E> {
    pub in_bounds: bool,
    pub fx: i64,
    pub fy: i64,
    pub dx: E,
    pub dy: E,
}

impl<E: Element> Tap<E> {
    pub fn new(x: E, y: E, w: usize, h: usize) -> Self {
        let fx = x.floor().as_f64() as i64;
        let fy = y.floor().as_f64() as i64;
        let in_x = fx >= -1 && fx <= w as i64 - 1;
        let in_y = fy >= -1 && fy <= h as i64 - 1;
        Tap {
            in_bounds: in_x && in_y,
            fx,
            fy,
            dx: x - E::from_f64(fx as f64),
            dy: y - E::from_f64(fy as f64),
        }
    }

    /// The four (iy, ix, weight, d/dx, d/dy) corner taps.
    pub fn corners(&self) -> [(i64, i64, E, E, E); 4] {
        let one = E::one();
        let (dx, dy) = (self.dx, self.dy);
        let (wx0, wx1) = (one - dx, dx);
        let (wy0, wy1) = (one - dy, dy);
        [
            (self.fy, self.fx, wy0 * wx0, -wy0, -wx0),
            (self.fy, self.fx + 1, wy0 * wx1, wy0, -wx1),
            (self.fy + 1, self.fx, wy1 * wx0, -wy1, wx0),
            (self.fy + 1, self.fx + 1, wy1 * wx1, wy1, wx1),
        ]
    }
}

struct BilinearSampleKernel;

impl<E: Element> OpKernel<E> for BilinearSampleKernel {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }
    fn backward(
        &self,
        grad: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _out: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (map, coords) = (inputs[0], inputs[1]);
        let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let p = coords.shape()[0];
        let gd = grad.data();

        let mut gmap = needs[0].then(|| Tensor::zeros(map.shape()));
        let mut gcoords = needs[1].then(|| Tensor::zeros(coords.shape()));

        for pi in 0..p {
            let tap = Tap::new(coords.data()[pi * 2], coords.data()[pi * 2 + 1], w, h);
            if !tap.in_bounds {
                continue;
            }
            for (iy, ix, wgt, dwx, dwy) in tap.corners() {
                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                    continue;
                }
                let off = (iy as usize) * w + ix as usize;
                for ch in 0..c {
                    let gv = gd[ch * p + pi];
                    if let Some(gm) = gmap.as_mut() {
                        let d = gm.data_mut();
                        d[ch * h * w + off] = d[ch * h * w + off] + gv * wgt;
                    }
                    if let Some(gc) = gcoords.as_mut() {
                        let v = map.data()[ch * h * w + off];
                        let d = gc.data_mut();
                        d[pi * 2] = d[pi * 2] + gv * v * dwx;
                        d[pi * 2 + 1] = d[pi * 2 + 1] + gv * v * dwy;
                    }
                }
            }
        }
        vec![gmap, gcoords, None]
    }
}

/// Sample `map: [C,H,W]` at `coords: [P,2]` rows of (x, y) pixel
/// positions. Returns values `[C,P]` plus a per-point in-bounds flag;
/// points whose whole 4-corner footprint lies outside the grid yield 0.
pub fn bilinear_sample<E: Element>(
    g: &mut Graph<E>,
    map: NodeId,
    coords: NodeId,
) -> Result<(NodeId, Vec<bool>)> {
    let ms = g.shape(map).to_vec();
    let cs = g.shape(coords).to_vec();
    if ms.len() != 3 || cs.len() != 2 || cs[1] != 2 {
        return Err(FlowError::shape(
            "bilinear_sample",
            format!("map {:?}, coords {:?}", ms, cs),
        ));
    }
    let (c, h, w) = (ms[0], ms[1], ms[2]);
    let p = cs[0];
    let mapv = g.value(map).data();
    let coordv = g.value(coords).data();
    let mut in_bounds = vec![false; p];
    let mut out = Tensor::zeros(&[c, p]);
    {
        let od = out.data_mut();
        for pi in 0..p {
            let tap = Tap::new(coordv[pi * 2], coordv[pi * 2 + 1], w, h);
            in_bounds[pi] = tap.in_bounds;
            if !tap.in_bounds {
                continue;
            }
            for (iy, ix, wgt, _, _) in tap.corners() {
                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                    continue;
                }
                let off = (iy as usize) * w + ix as usize;
                for ch in 0..c {
                    od[ch * p + pi] = od[ch * p + pi] + wgt * mapv[ch * h * w + off];
                }
            }
        }
    }
    let id = g.push_op(out, vec![map, coords], Box::new(BilinearSampleKernel));
    Ok((id, in_bounds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_conv(
        x: Tensor<f64>,
        w: Tensor<f64>,
        b: Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let mut g = Graph::new();
        let xi = g.constant(x);
        let wi = g.constant(w);
        let bi = g.constant(b);
        let y = conv2d(&mut g, xi, wi, bi, stride, pad).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = single_conv(x.clone(), w, b, 1, 0);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_zero_kernel_zero_output() {
        let x = Tensor::from_fn(&[2, 4, 4], |i| (i as f64).sin());
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let y = single_conv(x, w, b, 1, 1);
        assert_eq!(y.shape(), &[3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_hand_example_sum_product() {
        // 2x2 input against 2x2 kernel picking the diagonal: 1*1 + 4*1 = 5
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = single_conv(x, w, b, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 5.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(conv2d(&mut g, x, w, b, 1, 1).is_err());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[5], 3.0));
        let y = softmax(&mut g, x, &[0]).unwrap();
        for &v in g.value(y).data() {
            assert_relative_eq!(v, 0.2, max_relative = 1e-12);
        }
        let x2 = g.constant(Tensor::new(vec![2], vec![0.0, (2.0f64).ln()]).unwrap());
        let y2 = softmax(&mut g, x2, &[0]).unwrap();
        assert_relative_eq!(g.value(y2).data()[0], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(g.value(y2).data()[1], 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::<f64>::new();
        let vals = vec![0.3, -1.2, 2.0, 0.0];
        let a = g.constant(Tensor::new(vec![4], vals.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![4], vals.iter().map(|v| v + 7.5).collect()).unwrap());
        let ya = softmax(&mut g, a, &[0]).unwrap();
        let yb = softmax(&mut g, b, &[0]).unwrap();
        for (x, y) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn masked_softmax_excludes_entries() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3], vec![10.0, 0.0, 0.0]).unwrap());
        let mask = Arc::new(Mask::new(vec![3], vec![false, true, true]).unwrap());
        let y = softmax_masked(&mut g, x, &[0], &mask).unwrap();
        assert_eq!(g.value(y).data()[0], 0.0);
        assert_relative_eq!(g.value(y).data()[1], 0.5, max_relative = 1e-12);
        assert_relative_eq!(g.value(y).data()[2], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn avg_pool_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
        let y = avg_pool2(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let c = g.constant(Tensor::full(&[2, 4, 4], 1.5));
        let yc = avg_pool2(&mut g, c).unwrap();
        assert_eq!(g.shape(yc), &[2, 2, 2]);
        assert!(g.value(yc).data().iter().all(|&v| v == 1.5));

        let odd = g.constant(Tensor::zeros(&[3, 3]));
        assert!(avg_pool2(&mut g, odd).is_err());

        let eight = g.constant(Tensor::zeros(&[8, 8]));
        let p1 = avg_pool2(&mut g, eight).unwrap();
        let p2 = avg_pool2(&mut g, p1).unwrap();
        assert_eq!(g.shape(p2), &[2, 2]);
    }

    #[test]
    fn upsample_constant_and_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 8, 8], 4.0));
        let y = upsample2d(&mut g, x, 8).unwrap();
        assert_eq!(g.shape(y), &[2, 64, 64]);
        assert!(g.value(y).data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn bilinear_integer_coords_exact() {
        let mut g = Graph::<f64>::new();
        let map = g.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
        let coords = g.constant(Tensor::new(vec![2, 2], vec![2.0, 1.0, 0.0, 3.0]).unwrap());
        let (y, ib) = bilinear_sample(&mut g, map, coords).unwrap();
        assert_eq!(ib, vec![true, true]);
        assert_eq!(g.value(y).data(), &[6.0, 12.0]);
    }

    #[test]
    fn bilinear_center_of_four() {
        let mut g = Graph::<f64>::new();
        let map = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let coords = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let (y, ib) = bilinear_sample(&mut g, map, coords).unwrap();
        assert!(ib[0]);
        assert_relative_eq!(g.value(y).item(), 1.5, max_relative = 1e-12);
    }

    #[test]
    fn bilinear_far_outside_is_zero_invalid() {
        let mut g = Graph::<f64>::new();
        let map = g.constant(Tensor::full(&[1, 8, 8], 9.0));
        let coords = g.constant(Tensor::new(vec![1, 2], vec![-10.0, -10.0]).unwrap());
        let (y, ib) = bilinear_sample(&mut g, map, coords).unwrap();
        assert!(!ib[0]);
        assert_eq!(g.value(y).item(), 0.0);
    }
}
