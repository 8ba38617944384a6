//! End-to-end multi-frame flow network: shared feature encoder, per-pair
//! cost volumes, historical flow estimation, and the recurrent decoder
//! whose motion features are repaired from history before every update.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvMap;
use crate::costvolume::{build_cost_volume, build_pyramid, CorrScale, CostVolumePyramid};
use crate::element::Element;
use crate::error::{FlowError, Result};
use crate::graph::{Graph, NodeId};
use crate::lookup::{lookup_motion_feature, FlowDirection, LookupConfig, MotionFeature};
use crate::mfr::{coefficient_forward, recover, CoefficientNet, MfrConfig};
use crate::ops;
use crate::tensor::{he_normal, Mask, ParamStore, Tensor};

/// Dense per-pixel displacement in pixels, `[2, H, W]` with channel 0 the
/// x (width) component.
#[derive(Clone, Debug)]
pub struct FlowField<E: Element> {
    pub data: Tensor<E>,
    pub direction: FlowDirection,
}

impl<E: Element> FlowField<E> {
    pub fn zero(h: usize, w: usize, direction: FlowDirection) -> Self {
        FlowField {
            data: Tensor::zeros(&[2, h, w]),
            direction,
        }
    }
}

/// How per-iteration losses are combined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossWeighting {
    /// Every iteration weighted 1.
    Uniform,
    /// Weight `gamma^(K-k)` so late iterations dominate.
    Exponential { gamma: f64 },
}

impl LossWeighting {
    pub fn weights(&self, count: usize) -> Vec<f64> {
        match *self {
            LossWeighting::Uniform => vec![1.0; count],
            LossWeighting::Exponential { gamma } => (0..count)
                .map(|i| gamma.powi((count - 1 - i) as i32))
                .collect(),
        }
    }
}

/// Architecture and pipeline configuration.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Correlation feature dimension D.
    pub feature_dim: usize,
    /// Widths of the two intermediate encoder stages.
    pub stage_dims: [usize; 2],
    /// GRU hidden state channels.
    pub hidden_dim: usize,
    /// Context channels fed to every GRU step.
    pub context_dim: usize,
    /// Motion encoder output channels.
    pub motion_dim: usize,
    /// Flow head hidden width.
    pub head_dim: usize,
    pub lookup: LookupConfig,
    pub mfr: MfrConfig,
    /// GRU iterations of the main decoder loop.
    pub iterations: usize,
    /// GRU iterations when estimating each historical flow.
    pub history_iterations: usize,
    pub corr_scale: CorrScale,
    /// Repair invalid motion-feature entries before decoding.
    pub recovery: bool,
    /// Treat the invalid support as empty (backbone behavior) while still
    /// running the recovery plumbing; used by ablations and A/B tests.
    pub force_empty_support: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 32,
            stage_dims: [16, 24],
            hidden_dim: 32,
            context_dim: 32,
            motion_dim: 32,
            head_dim: 48,
            lookup: LookupConfig::default(),
            mfr: MfrConfig::default(),
            iterations: 6,
            history_iterations: 4,
            corr_scale: CorrScale::InvSqrtDim,
            recovery: true,
            force_empty_support: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("context_dim", self.context_dim),
            ("motion_dim", self.motion_dim),
            ("head_dim", self.head_dim),
            ("stage1", self.stage_dims[0]),
            ("stage2", self.stage_dims[1]),
        ] {
            if v == 0 {
                return Err(FlowError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.lookup.levels == 0 {
            return Err(FlowError::Config("lookup levels must be >= 1".into()));
        }
        self.mfr.validate()
    }

    pub fn motion_channels(&self) -> usize {
        self.lookup.channels()
    }

    pub fn history_frames(&self) -> usize {
        self.mfr.history_frames
    }

    /// Total frames per sample: N history + current + next.
    pub fn frames_per_sample(&self) -> usize {
        self.history_frames() + 2
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("model.feature_dim", self.feature_dim.to_string());
        kv.set("model.stage1", self.stage_dims[0].to_string());
        kv.set("model.stage2", self.stage_dims[1].to_string());
        kv.set("model.hidden_dim", self.hidden_dim.to_string());
        kv.set("model.context_dim", self.context_dim.to_string());
        kv.set("model.motion_dim", self.motion_dim.to_string());
        kv.set("model.head_dim", self.head_dim.to_string());
        kv.set("model.radius", self.lookup.radius.to_string());
        kv.set("model.levels", self.lookup.levels.to_string());
        kv.set("model.history_frames", self.mfr.history_frames.to_string());
        kv.set("model.window", self.mfr.window.to_string());
        kv.set(
            "model.literal_prefactor",
            self.mfr.literal_prefactor.to_string(),
        );
        kv.set("model.mfr_hidden", self.mfr.hidden.to_string());
        kv.set("model.mfr_shared", self.mfr.shared_weights.to_string());
        kv.set(
            "model.mfr_spatial_softmax",
            self.mfr.spatial_softmax.to_string(),
        );
        kv.set("model.iterations", self.iterations.to_string());
        kv.set(
            "model.history_iterations",
            self.history_iterations.to_string(),
        );
        kv.set(
            "model.corr_scale",
            match self.corr_scale {
                CorrScale::One => "one",
                CorrScale::InvSqrtDim => "inv_sqrt_dim",
            },
        );
        kv.set("model.recovery", self.recovery.to_string());
        kv.set(
            "model.force_empty_support",
            self.force_empty_support.to_string(),
        );
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            feature_dim: kv.get_or("model.feature_dim", d.feature_dim)?,
            stage_dims: [
                kv.get_or("model.stage1", d.stage_dims[0])?,
                kv.get_or("model.stage2", d.stage_dims[1])?,
            ],
            hidden_dim: kv.get_or("model.hidden_dim", d.hidden_dim)?,
            context_dim: kv.get_or("model.context_dim", d.context_dim)?,
            motion_dim: kv.get_or("model.motion_dim", d.motion_dim)?,
            head_dim: kv.get_or("model.head_dim", d.head_dim)?,
            lookup: LookupConfig {
                radius: kv.get_or("model.radius", d.lookup.radius)?,
                levels: kv.get_or("model.levels", d.lookup.levels)?,
            },
            mfr: MfrConfig {
                history_frames: kv.get_or("model.history_frames", d.mfr.history_frames)?,
                window: kv.get_or("model.window", d.mfr.window)?,
                literal_prefactor: kv
                    .get_bool_or("model.literal_prefactor", d.mfr.literal_prefactor)?,
                hidden: kv.get_or("model.mfr_hidden", d.mfr.hidden)?,
                shared_weights: kv.get_bool_or("model.mfr_shared", d.mfr.shared_weights)?,
                spatial_softmax: kv
                    .get_bool_or("model.mfr_spatial_softmax", d.mfr.spatial_softmax)?,
            },
            iterations: kv.get_or("model.iterations", d.iterations)?,
            history_iterations: kv.get_or("model.history_iterations", d.history_iterations)?,
            corr_scale: match kv.get("model.corr_scale") {
                None => d.corr_scale,
                Some("one") => CorrScale::One,
                Some("inv_sqrt_dim") => CorrScale::InvSqrtDim,
                Some(v) => {
                    return Err(FlowError::Config(format!("bad model.corr_scale {:?}", v)))
                }
            },
            recovery: kv.get_bool_or("model.recovery", d.recovery)?,
            force_empty_support: kv
                .get_bool_or("model.force_empty_support", d.force_empty_support)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All trainable weights plus their configuration.
#[derive(Clone, Debug)]
pub struct ModelParams<E: Element> {
    pub store: ParamStore<E>,
    pub config: ModelConfig,
}

impl<E: Element> ModelParams<E> {
    /// Fresh parameters with He-normal weights and zero biases, seeded for
    /// reproducibility.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut conv = |store: &mut ParamStore<E>,
                        name: &str,
                        cout: usize,
                        cin: usize,
                        k: usize,
                        rng: &mut ChaCha8Rng| {
            let fan_in = cin * k * k;
            store.insert(format!("{name}.w"), he_normal(rng, &[cout, cin, k, k], fan_in));
            store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        };

        let [s1, s2] = config.stage_dims;
        let d = config.feature_dim;
        conv(&mut store, "fnet.conv1", s1, 3, 3, &mut rng);
        conv(&mut store, "fnet.conv2", s2, s1, 3, &mut rng);
        conv(&mut store, "fnet.conv3", d, s2, 3, &mut rng);

        let ctx_out = config.hidden_dim + config.context_dim;
        conv(&mut store, "cnet.conv1", s1, 3, 3, &mut rng);
        conv(&mut store, "cnet.conv2", s2, s1, 3, &mut rng);
        conv(&mut store, "cnet.conv3", ctx_out, s2, 3, &mut rng);

        let m_ch = config.motion_channels();
        conv(&mut store, "menc.corr", config.motion_dim, m_ch, 1, &mut rng);
        conv(
            &mut store,
            "menc.mix",
            config.motion_dim,
            config.motion_dim + 2,
            3,
            &mut rng,
        );

        let gru_in = config.hidden_dim + config.motion_dim + config.context_dim;
        conv(&mut store, "gru.z", config.hidden_dim, gru_in, 3, &mut rng);
        conv(&mut store, "gru.r", config.hidden_dim, gru_in, 3, &mut rng);
        conv(&mut store, "gru.q", config.hidden_dim, gru_in, 3, &mut rng);

        conv(&mut store, "head.conv1", config.head_dim, config.hidden_dim, 3, &mut rng);
        conv(&mut store, "head.conv2", 2, config.head_dim, 3, &mut rng);

        let nets = if config.mfr.shared_weights {
            1
        } else {
            config.mfr.history_frames
        };
        for k in 0..nets {
            let prefix = if config.mfr.shared_weights {
                "mfr".to_string()
            } else {
                format!("mfr.{k}")
            };
            conv(
                &mut store,
                &format!("{prefix}.conv1"),
                config.mfr.hidden,
                m_ch,
                3,
                &mut rng,
            );
            conv(
                &mut store,
                &format!("{prefix}.conv2"),
                config.mfr.window,
                config.mfr.hidden,
                3,
                &mut rng,
            );
        }

        Ok(ModelParams { store, config })
    }

    pub fn cast<T: Element>(&self) -> ModelParams<T> {
        ModelParams {
            store: self.store.cast(),
            config: self.config.clone(),
        }
    }
}

/// Name -> node bindings of a parameter store on one graph.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Bind every parameter on the graph; `trainable` controls whether the
/// leaves receive gradients.
pub fn bind_params<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    trainable: bool,
) -> BoundParams {
    let mut ids = BTreeMap::new();
    for (name, p) in store.iter() {
        let id = if trainable && p.trainable {
            g.variable(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        ids.insert(name.clone(), id);
    }
    BoundParams { ids }
}

/// Add the gradients reached by the last backward pass into the store,
/// scaled by `scale` (e.g. 1/batch).
pub fn accumulate_grads<E: Element>(
    g: &Graph<E>,
    bound: &BoundParams,
    store: &mut ParamStore<E>,
    scale: E,
) {
    for (name, &id) in bound.iter() {
        let Some(grad) = g.grad(id) else { continue };
        let p = store.get_mut(name).expect("bound param exists in store");
        if !p.trainable {
            continue;
        }
        let dst = p.grad.data_mut();
        for (d, s) in dst.iter_mut().zip(grad.data()) {
            *d = *d + *s * scale;
        }
    }
}

fn conv_layer<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    ops::conv2d(
        g,
        x,
        bound.id(&format!("{name}.w")),
        bound.id(&format!("{name}.b")),
        stride,
        padding,
    )
}

/// Shared feature encoder: three stride-2 convolutions to 1/8 resolution.
pub fn extract_features<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    image: NodeId,
) -> Result<NodeId> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(FlowError::shape("extract_features", format!("{:?}", shape)));
    }
    if shape[1] % 8 != 0 || shape[2] % 8 != 0 {
        return Err(FlowError::shape(
            "extract_features",
            format!("image {}x{} not divisible by 8", shape[1], shape[2]),
        ));
    }
    let c1 = conv_layer(g, bound, "fnet.conv1", image, 2, 1)?;
    let r1 = ops::relu(g, c1);
    let c2 = conv_layer(g, bound, "fnet.conv2", r1, 2, 1)?;
    let r2 = ops::relu(g, c2);
    conv_layer(g, bound, "fnet.conv3", r2, 2, 1)
}

/// Context encoder on the anchor frame: tanh half initializes the GRU
/// hidden state, relu half is injected into every iteration.
fn context_split<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    image: NodeId,
) -> Result<(NodeId, NodeId)> {
    let c1 = conv_layer(g, bound, "cnet.conv1", image, 2, 1)?;
    let r1 = ops::relu(g, c1);
    let c2 = conv_layer(g, bound, "cnet.conv2", r1, 2, 1)?;
    let r2 = ops::relu(g, c2);
    let c3 = conv_layer(g, bound, "cnet.conv3", r2, 2, 1)?;
    let hid = ops::slice_axis(g, c3, 0, 0, cfg.hidden_dim)?;
    let ctx = ops::slice_axis(g, c3, 0, cfg.hidden_dim, cfg.hidden_dim + cfg.context_dim)?;
    Ok((ops::tanh(g, hid), ops::relu(g, ctx)))
}

/// Encode a (possibly recovered) motion feature together with the current
/// flow into the decoder input.
fn motion_input<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    feature: NodeId,
    flow: NodeId,
) -> Result<NodeId> {
    let corr = conv_layer(g, bound, "menc.corr", feature, 1, 0)?;
    let corr = ops::relu(g, corr);
    let cat = ops::concat(g, 0, &[corr, flow])?;
    let mixed = conv_layer(g, bound, "menc.mix", cat, 1, 1)?;
    Ok(ops::relu(g, mixed))
}

fn gru_update<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    hidden: NodeId,
    x: NodeId,
) -> Result<NodeId> {
    let hx = ops::concat(g, 0, &[hidden, x])?;
    let z = conv_layer(g, bound, "gru.z", hx, 1, 1)?;
    let z = ops::sigmoid(g, z);
    let r = conv_layer(g, bound, "gru.r", hx, 1, 1)?;
    let r = ops::sigmoid(g, r);
    let rh = ops::mul(g, r, hidden)?;
    let rhx = ops::concat(g, 0, &[rh, x])?;
    let q = conv_layer(g, bound, "gru.q", rhx, 1, 1)?;
    let q = ops::tanh(g, q);
    let keep = ops::affine(g, z, -E::one(), E::one());
    let kept = ops::mul(g, keep, hidden)?;
    let new = ops::mul(g, z, q)?;
    ops::add(g, kept, new)
}

fn flow_delta<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    hidden: NodeId,
) -> Result<NodeId> {
    let mid = conv_layer(g, bound, "head.conv1", hidden, 1, 1)?;
    let mid = ops::relu(g, mid);
    conv_layer(g, bound, "head.conv2", mid, 1, 1)
}

fn coefficient_nets(bound: &BoundParams, cfg: &ModelConfig) -> Vec<CoefficientNet> {
    if cfg.mfr.shared_weights {
        vec![CoefficientNet {
            conv1_w: bound.id("mfr.conv1.w"),
            conv1_b: bound.id("mfr.conv1.b"),
            conv2_w: bound.id("mfr.conv2.w"),
            conv2_b: bound.id("mfr.conv2.b"),
        }]
    } else {
        (0..cfg.mfr.history_frames)
            .map(|k| CoefficientNet {
                conv1_w: bound.id(&format!("mfr.{k}.conv1.w")),
                conv1_b: bound.id(&format!("mfr.{k}.conv1.b")),
                conv2_w: bound.id(&format!("mfr.{k}.conv2.w")),
                conv2_b: bound.id(&format!("mfr.{k}.conv2.b")),
            })
            .collect()
    }
}

/// One backbone refinement loop without recovery: lookup, GRU update,
/// flow-head delta. Returns the final feature-resolution flow.
fn refine_loop<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    pyramid: &CostVolumePyramid,
    ctx: NodeId,
    hidden0: NodeId,
    iterations: usize,
    direction: FlowDirection,
) -> Result<NodeId> {
    let (h, w) = (g.shape(ctx)[1], g.shape(ctx)[2]);
    let mut flow = g.constant(Tensor::zeros(&[2, h, w]));
    let mut hidden = hidden0;
    for _ in 0..iterations {
        let m = lookup_motion_feature(g, pyramid, flow, &cfg.lookup, direction)?;
        let x = motion_input(g, bound, m.node, flow)?;
        let xc = ops::concat(g, 0, &[x, ctx])?;
        hidden = gru_update(g, bound, hidden, xc)?;
        let delta = flow_delta(g, bound, hidden)?;
        flow = ops::add(g, flow, delta)?;
    }
    Ok(flow)
}

/// Backbone-only two-frame flow estimation at feature resolution.
pub fn estimate_flow_pair<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    frame_a: NodeId,
    frame_b: NodeId,
    iterations: usize,
) -> Result<NodeId> {
    let fa = extract_features(g, bound, frame_a)?;
    let fb = extract_features(g, bound, frame_b)?;
    let scale = cfg.corr_scale.factor(cfg.feature_dim);
    let vol = build_cost_volume(g, fa, fb, scale)?;
    let pyr = build_pyramid(g, vol, cfg.lookup.levels, scale)?;
    let (hidden0, ctx) = context_split(g, bound, cfg, frame_a)?;
    refine_loop(
        g,
        bound,
        cfg,
        &pyr,
        ctx,
        hidden0,
        iterations,
        FlowDirection::ToNext,
    )
}

/// Everything the multi-frame forward pass exposes.
pub struct MultiframeOutput {
    /// Full-resolution flow prediction per iteration.
    pub predictions: Vec<NodeId>,
    /// Feature-resolution flow per iteration.
    pub flows: Vec<NodeId>,
    /// Validity of the forward lookup per iteration.
    pub validity: Vec<crate::lookup::ValidityMask>,
    /// Motion feature fed to the decoder per iteration (recovered when
    /// recovery is on).
    pub decoded_features: Vec<NodeId>,
    /// Raw forward motion feature per iteration, before recovery.
    pub raw_features: Vec<NodeId>,
    /// Historical motion features (fixed across iterations).
    pub histories: Vec<MotionFeature>,
    /// Historical flows at feature resolution.
    pub history_flows: Vec<NodeId>,
}

/// Multi-frame forward pass over `N+2` frames ordered
/// `[I_{t-N}, ..., I_{t-1}, I_t, I_{t+1}]`.
///
/// Historical flows are estimated with the backbone loop, their inverse
/// motion features looked up once and held fixed; each decoder iteration
/// then looks up the forward feature at the current flow, determines the
/// invalid support, recovers it from history and updates the flow.
pub fn forward_multiframe<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    frames: &[NodeId],
    iterations: usize,
) -> Result<MultiframeOutput> {
    let n = cfg.history_frames();
    if frames.len() != n + 2 {
        return Err(FlowError::Config(format!(
            "expected {} frames (N={} history + current + next), got {}",
            n + 2,
            n,
            frames.len()
        )));
    }
    let t_idx = n;
    let scale = cfg.corr_scale.factor(cfg.feature_dim);

    let feats: Vec<NodeId> = frames
        .iter()
        .map(|&f| extract_features(g, bound, f))
        .collect::<Result<_>>()?;
    let (hidden0, ctx) = context_split(g, bound, cfg, frames[t_idx])?;

    let fwd_vol = build_cost_volume(g, feats[t_idx], feats[t_idx + 1], scale)?;
    let fwd_pyr = build_pyramid(g, fwd_vol, cfg.lookup.levels, scale)?;

    let mut histories = Vec::with_capacity(n);
    let mut history_flows = Vec::with_capacity(n);
    for k in 1..=n {
        let past = feats[t_idx - k];
        let vol = build_cost_volume(g, feats[t_idx], past, scale)?;
        let pyr = build_pyramid(g, vol, cfg.lookup.levels, scale)?;
        let flow = refine_loop(
            g,
            bound,
            cfg,
            &pyr,
            ctx,
            hidden0,
            cfg.history_iterations,
            FlowDirection::ToPast(k),
        )?;
        let m = lookup_motion_feature(g, &pyr, flow, &cfg.lookup, FlowDirection::ToPast(k))?;
        histories.push(m);
        history_flows.push(flow);
    }

    let nets = coefficient_nets(bound, cfg);
    let hist_refs: Vec<&MotionFeature> = histories.iter().collect();
    let alpha = if cfg.recovery {
        Some(coefficient_forward(g, &nets, &hist_refs, &cfg.mfr)?)
    } else {
        None
    };

    let (h, w) = (g.shape(ctx)[1], g.shape(ctx)[2]);
    let mut flow = g.constant(Tensor::zeros(&[2, h, w]));
    let mut hidden = hidden0;
    let mut out = MultiframeOutput {
        predictions: Vec::with_capacity(iterations),
        flows: Vec::with_capacity(iterations),
        validity: Vec::with_capacity(iterations),
        decoded_features: Vec::with_capacity(iterations),
        raw_features: Vec::with_capacity(iterations),
        histories: Vec::new(),
        history_flows,
    };

    for _ in 0..iterations {
        let m = lookup_motion_feature(g, &fwd_pyr, flow, &cfg.lookup, FlowDirection::ToNext)?;
        let decoded = match (&alpha, cfg.recovery) {
            (Some(alpha), true) => {
                let support = if cfg.force_empty_support {
                    Mask::full(m.validity.valid.shape(), false)
                } else {
                    m.validity.invalid_support()
                };
                recover(g, &m, &support, &hist_refs, alpha, &cfg.mfr)?
            }
            _ => m.node,
        };
        let x = motion_input(g, bound, decoded, flow)?;
        let xc = ops::concat(g, 0, &[x, ctx])?;
        hidden = gru_update(g, bound, hidden, xc)?;
        let delta = flow_delta(g, bound, hidden)?;
        flow = ops::add(g, flow, delta)?;

        out.raw_features.push(m.node);
        out.validity.push(m.validity.clone());
        out.decoded_features.push(decoded);
        out.flows.push(flow);
        out.predictions.push(upsample_flow(g, flow, 8)?);
    }
    out.histories = histories;
    Ok(out)
}

/// Bilinear upsampling of a feature-resolution flow with values rescaled
/// by the same factor.
pub fn upsample_flow<E: Element>(g: &mut Graph<E>, flow: NodeId, factor: usize) -> Result<NodeId> {
    let up = ops::upsample2d(g, flow, factor)?;
    Ok(ops::affine(g, up, E::from_usize(factor), E::zero()))
}

/// Weighted sum over iterations of the mean per-pixel endpoint norm
/// against ground truth, restricted to `valid` pixels.
pub fn sequence_loss<E: Element>(
    g: &mut Graph<E>,
    predictions: &[NodeId],
    gt: NodeId,
    valid: &Mask,
    weights: &[f64],
) -> Result<NodeId> {
    if predictions.is_empty() || predictions.len() != weights.len() {
        return Err(FlowError::Config(format!(
            "{} predictions vs {} weights",
            predictions.len(),
            weights.len()
        )));
    }
    let mask = std::sync::Arc::new(valid.clone());
    let mut total: Option<NodeId> = None;
    for (&pred, &wk) in predictions.iter().zip(weights) {
        let diff = ops::sub(g, pred, gt)?;
        let sq = ops::mul(g, diff, diff)?;
        let ss = ops::sum_axes(g, sq, &[0])?;
        let epe = ops::sqrt(g, ss)?;
        let mean = ops::masked_mean(g, epe, &mask)?;
        let weighted = ops::affine(g, mean, E::from_f64(wk), E::zero());
        total = Some(match total {
            None => weighted,
            Some(acc) => ops::add(g, acc, weighted)?,
        });
    }
    Ok(total.expect("non-empty predictions"))
}

/// Convenience inference entry point: runs the multi-frame forward pass
/// with frozen parameters and returns the per-iteration full-resolution
/// flow fields.
pub fn predict<E: Element>(
    params: &ModelParams<E>,
    frames: &[Tensor<E>],
    iterations: usize,
) -> Result<Vec<FlowField<E>>> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, &params.store, false);
    let ids: Vec<NodeId> = frames.iter().map(|f| g.constant(f.clone())).collect();
    let out = forward_multiframe(&mut g, &bound, &params.config, &ids, iterations)?;
    Ok(out
        .predictions
        .iter()
        .map(|&id| FlowField {
            data: g.value(id).clone(),
            direction: FlowDirection::ToNext,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            stage_dims: [6, 8],
            hidden_dim: 8,
            context_dim: 8,
            motion_dim: 8,
            head_dim: 8,
            lookup: LookupConfig {
                radius: 1,
                levels: 2,
            },
            mfr: MfrConfig {
                history_frames: 2,
                window: 1,
                hidden: 8,
                ..Default::default()
            },
            iterations: 2,
            history_iterations: 1,
            ..Default::default()
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn feature_shapes_and_determinism() {
        let cfg = ModelConfig {
            feature_dim: 32,
            ..tiny_config()
        };
        let params = ModelParams::<f64>::init(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 64, 64);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params.store, false);
        let i1 = g.constant(img.clone());
        let i2 = g.constant(img);
        let f1 = extract_features(&mut g, &bound, i1).unwrap();
        let f2 = extract_features(&mut g, &bound, i2).unwrap();
        assert_eq!(g.shape(f1), &[32, 8, 8]);
        assert_eq!(g.value(f1).data(), g.value(f2).data());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let params = ModelParams::<f64>::init(tiny_config(), 3).unwrap();
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params.store, false);
        let img = g.constant(Tensor::zeros(&[3, 16, 16]));
        let f = extract_features(&mut g, &bound, img).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_image_rejected() {
        let params = ModelParams::<f64>::init(tiny_config(), 3).unwrap();
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params.store, false);
        let img = g.constant(Tensor::zeros(&[3, 20, 16]));
        assert!(extract_features(&mut g, &bound, img).is_err());
    }

    #[test]
    fn zero_iterations_give_zero_flow() {
        let params = ModelParams::<f64>::init(tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params.store, false);
        let a = g.constant(random_image(&mut rng, 16, 16));
        let b = g.constant(random_image(&mut rng, 16, 16));
        let flow = estimate_flow_pair(&mut g, &bound, &params.config, a, b, 0).unwrap();
        assert_eq!(g.shape(flow), &[2, 2, 2]);
        assert!(g.value(flow).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multiframe_shape_contract() {
        let params = ModelParams::<f64>::init(tiny_config(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params.store, false);
        let frames: Vec<NodeId> = (0..4)
            .map(|_| {
                let img = random_image(&mut rng, 64, 64);
                g.constant(img)
            })
            .collect();
        let out = forward_multiframe(&mut g, &bound, &params.config, &frames, 4).unwrap();
        assert_eq!(out.predictions.len(), 4);
        for &p in &out.predictions {
            assert_eq!(g.shape(p), &[2, 64, 64]);
        }
        assert_eq!(out.histories.len(), 2);

        let too_few: Vec<NodeId> = frames[..3].to_vec();
        assert!(forward_multiframe(&mut g, &bound, &params.config, &too_few, 2).is_err());
    }

    #[test]
    fn recovery_off_equals_forced_empty_support_bit_exact() {
        let mut cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<Tensor<f64>> = (0..4).map(|_| random_image(&mut rng, 32, 32)).collect();

        cfg.recovery = false;
        let params_off = ModelParams::<f64>::init(cfg.clone(), 11).unwrap();
        let preds_off = predict(&params_off, &frames, 3).unwrap();

        cfg.recovery = true;
        cfg.force_empty_support = true;
        let params_forced = ModelParams::<f64> {
            store: params_off.store.clone(),
            config: cfg,
        };
        let preds_forced = predict(&params_forced, &frames, 3).unwrap();

        for (a, b) in preds_off.iter().zip(&preds_forced) {
            assert_eq!(a.data.data(), b.data.data());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ModelParams::<f64>::init(tiny_config(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let frames: Vec<Tensor<f64>> = (0..4).map(|_| random_image(&mut rng, 32, 32)).collect();
        let a = predict(&params, &frames, 3).unwrap();
        let b = predict(&params, &frames, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data.data(), y.data.data());
        }
    }

    #[test]
    fn upsample_flow_scales_values() {
        let mut g = Graph::<f64>::new();
        let flow = g.constant(Tensor::from_fn(&[2, 8, 8], |i| {
            if i < 64 {
                1.0
            } else {
                0.0
            }
        }));
        let up = upsample_flow(&mut g, flow, 8).unwrap();
        assert_eq!(g.shape(up), &[2, 64, 64]);
        for (i, &v) in g.value(up).data().iter().enumerate() {
            let expect = if i < 64 * 64 { 8.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12);
        }

        let zero = g.constant(Tensor::zeros(&[2, 8, 8]));
        let upz = upsample_flow(&mut g, zero, 8).unwrap();
        assert!(g.value(upz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_loss_examples() {
        let mut g = Graph::<f64>::new();
        let gt = g.constant(Tensor::from_fn(&[2, 4, 4], |i| (i % 5) as f64));
        let valid = Mask::full(&[4, 4], true);

        // exact prediction: zero loss
        let exact = g.constant(g.value(gt).clone());
        let loss = sequence_loss(&mut g, &[exact], gt, &valid, &[1.0]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);

        // constant (3,4) offset: loss 5
        let off = {
            let base = g.value(gt).clone();
            let t = Tensor::from_fn(&[2, 4, 4], |i| {
                base.data()[i] + if i < 16 { 3.0 } else { 4.0 }
            });
            g.constant(t)
        };
        let loss = sequence_loss(&mut g, &[off], gt, &valid, &[1.0]).unwrap();
        assert!((g.value(loss).item() - 5.0).abs() < 1e-12);

        // weighted two-prediction combination: 0.8*2 + 1*1 = 2.6
        let by = |g: &mut Graph<f64>, gt: NodeId, d: f64| {
            let base = g.value(gt).clone();
            let t = Tensor::from_fn(&[2, 4, 4], |i| base.data()[i] + if i < 16 { d } else { 0.0 });
            g.constant(t)
        };
        let p1 = by(&mut g, gt, 2.0);
        let p2 = by(&mut g, gt, 1.0);
        let w = LossWeighting::Exponential { gamma: 0.8 }.weights(2);
        assert_eq!(w, vec![0.8, 1.0]);
        let loss = sequence_loss(&mut g, &[p1, p2], gt, &valid, &w).unwrap();
        assert!((g.value(loss).item() - 2.6).abs() < 1e-12);
    }

    #[test]
    fn recovery_path_receives_gradient() {
        let params = ModelParams::<f64>::init(tiny_config(), 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params.store, true);
        let frames: Vec<NodeId> = (0..4)
            .map(|_| {
                let img = random_image(&mut rng, 32, 32);
                g.constant(img)
            })
            .collect();
        let out = forward_multiframe(&mut g, &bound, &params.config, &frames, 2).unwrap();
        assert!(
            out.validity.iter().any(|v| v.invalid_support().any()),
            "test scene must produce a nonempty invalid support"
        );
        let gt = g.constant(Tensor::from_fn(&[2, 32, 32], |i| {
            if i < 32 * 32 {
                2.0
            } else {
                -1.0
            }
        }));
        let valid = Mask::full(&[32, 32], true);
        let loss = sequence_loss(&mut g, &out.predictions, gt, &valid, &[1.0, 1.0]).unwrap();
        g.backward(loss).unwrap();
        let gw = g.grad(bound.id("mfr.conv1.w")).expect("coefficient net grad");
        assert!(gw.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = tiny_config();
        let kv = cfg.to_kv();
        let back = ModelConfig::from_kv(&kv).unwrap();
        assert_eq!(format!("{:?}", cfg), format!("{:?}", back));
    }
}
