//! Fusion decoder: stacked self-attention over mixed modality queries (plus
//! temporal history tokens), projection-based deformable attention into the
//! camera views, vanilla attention over sparse BEV pillars, feed-forward
//! blocks, per-layer image-query calibration, and shared output heads.
//!
//! Calibration refines only the depth probabilities of image queries, in
//! logit space; sampling positions never change after generation. Point-cloud
//! anchors are never recalibrated.

use std::collections::VecDeque;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    mat4_apply, mat4_flatten, mat4_mul, mat4_rigid_inverse, rotation_is_orthonormal, Box3D,
    CameraModel, Mat4, MIN_VALID_DEPTH,
};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::nn::{
    mlp_forward, multi_head_attention, AttentionSpec, LnParams, MlpSpec, ParamStore,
};
use crate::numerics::tensor::{sinpos_encode, Tensor};
use crate::query_gen::{ImageQueries, PointCloudQuerySet};
use crate::scenesim::PillarFeatureSet;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Deformable sampling points per query.
    pub deform_samples: usize,
    pub use_cross_attention: bool,
    pub n_views: usize,
    pub n_d: usize,
    pub feat_stride: usize,
    pub feat_channels: usize,
    pub ffn_hidden: usize,
    pub ln_eps: f64,
    /// Deformable offsets are tanh-bounded to +- this many meters.
    pub offset_bound: f64,
    pub sinpos_channels: usize,
    pub temperature: f64,
    pub num_classes: usize,
    /// Divisor applied to raw sampling positions before the U-PE base MLP.
    pub upe_input_scale: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("decoder needs at least one layer"));
        }
        if self.deform_samples == 0 {
            return Err(Error::config("deformable attention needs at least one sample"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config("width must be divisible by heads"));
        }
        Ok(())
    }
}

/// Positional encoding of 3D points: MLP(SinPos(r)).
#[derive(Debug, Clone)]
pub struct PeParams {
    pub mlp: MlpSpec,
    pub channels: usize,
    pub temperature: f64,
}

pub fn encode_pe(g: &mut Graph, store: &ParamStore, pe: &PeParams, points: NodeId) -> Result<NodeId> {
    let enc = g.sinpos(points, pe.channels, pe.temperature)?;
    mlp_forward(g, store, &pe.mlp, enc)
}

/// Uncertainty-aware positional encoding: a base encoding of the flattened
/// sampling positions, gated elementwise by a sigmoid transform of the
/// depth probabilities.
#[derive(Debug, Clone)]
pub struct UpeParams {
    pub base: MlpSpec,
    pub gate: MlpSpec,
    pub out: MlpSpec,
    pub input_scale: f64,
}

pub fn encode_upe(g: &mut Graph, store: &ParamStore, upe: &UpeParams, s: NodeId, u: NodeId) -> Result<NodeId> {
    let uv = g.value(u);
    let (rows, n) = uv.dims2()?;
    for i in 0..rows {
        let sum: f64 = uv.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 || uv.row(i).iter().any(|&p| p < 0.0) {
            return Err(Error::domain(format!("U-PE row {i} is not a distribution (sum {sum})")));
        }
    }
    let _ = n;
    let scaled = g.scale(s, upe.input_scale);
    let base = mlp_forward(g, store, &upe.base, scaled)?;
    let gate_raw = mlp_forward(g, store, &upe.gate, u)?;
    let gate = g.sigmoid(gate_raw);
    let gated = g.mul(base, gate)?;
    mlp_forward(g, store, &upe.out, gated)
}

/// Per-layer parameter block.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub self_attn: AttentionSpec,
    pub ln_self: LnParams,
    pub offset_mlp: MlpSpec,
    pub weight_mlp: MlpSpec,
    pub img_value_w: usize,
    pub img_value_b: usize,
    pub ln_img: LnParams,
    pub pillar_attn: AttentionSpec,
    pub ln_pillar: LnParams,
    pub ffn: MlpSpec,
    pub ln_ffn: LnParams,
    pub calib: MlpSpec,
}

/// All decoder parameters (layers plus shared encodings and heads).
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub layers: Vec<LayerParams>,
    pub pe: PeParams,
    pub upe: UpeParams,
    pub pillar_pe: MlpSpec,
    pub cls_head: MlpSpec,
    pub reg_head: MlpSpec,
    pub history_mlp: MlpSpec,
}

impl DecoderParams {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let tag = |s: &str| format!("decoder.l{l}.{s}");
            layers.push(LayerParams {
                self_attn: AttentionSpec::build(store, rng, &tag("self"), c, cfg.heads)?,
                ln_self: LnParams::build(store, &tag("ln_self"), c),
                offset_mlp: MlpSpec::build(store, rng, &tag("offsets"), &[c, c, 3 * cfg.deform_samples])?,
                weight_mlp: MlpSpec::build(
                    store,
                    rng,
                    &tag("weights"),
                    &[c, c, cfg.n_views * cfg.deform_samples],
                )?,
                img_value_w: store.add(tag("img_value.w"), crate::numerics::nn::glorot_uniform(rng, cfg.feat_channels, c)),
                img_value_b: store.add(tag("img_value.b"), Tensor::zeros(&[c])),
                ln_img: LnParams::build(store, &tag("ln_img"), c),
                pillar_attn: AttentionSpec::build(store, rng, &tag("pillar"), c, cfg.heads)?,
                ln_pillar: LnParams::build(store, &tag("ln_pillar"), c),
                ffn: MlpSpec::build(store, rng, &tag("ffn"), &[c, cfg.ffn_hidden, c])?,
                ln_ffn: LnParams::build(store, &tag("ln_ffn"), c),
                calib: MlpSpec::build(store, rng, &tag("calib"), &[c, c, cfg.n_d])?,
            });
        }
        let sp = cfg.sinpos_channels;
        Ok(DecoderParams {
            layers,
            pe: PeParams {
                mlp: MlpSpec::build(store, rng, "decoder.pe", &[3 * sp, c, c])?,
                channels: sp,
                temperature: cfg.temperature,
            },
            upe: UpeParams {
                base: MlpSpec::build(store, rng, "decoder.upe.base", &[3 * cfg.n_d, c, c])?,
                gate: MlpSpec::build(store, rng, "decoder.upe.gate", &[cfg.n_d, c, c])?,
                out: MlpSpec::build(store, rng, "decoder.upe.out", &[c, c, c])?,
                input_scale: cfg.upe_input_scale,
            },
            pillar_pe: MlpSpec::build(store, rng, "decoder.pillar_pe", &[2 * sp, c, c])?,
            cls_head: MlpSpec::build(store, rng, "decoder.cls_head", &[c, c, cfg.num_classes])?,
            reg_head: MlpSpec::build(store, rng, "decoder.reg_head", &[c, c, 10])?,
            history_mlp: MlpSpec::build(store, rng, "decoder.history", &[19 * sp, c, c])?,
        })
    }
}

/// Self-attention with history tokens as extra keys/values, then residual
/// add and layer norm. Queries attend from content + positional encoding;
/// values are contents only.
#[allow(clippy::too_many_arguments)]
pub fn self_attention_layer(
    g: &mut Graph,
    store: &ParamStore,
    attn: &AttentionSpec,
    ln: &LnParams,
    contents: NodeId,
    pos: NodeId,
    history: Option<(NodeId, NodeId)>,
    eps: f64,
) -> Result<NodeId> {
    let q_in = g.add(contents, pos)?;
    let (k_in, v_in) = match history {
        Some((hk, hv)) => (g.concat_rows(&[q_in, hk])?, g.concat_rows(&[contents, hv])?),
        None => (q_in, contents),
    };
    let att = multi_head_attention(g, store, attn, q_in, k_in, v_in)?;
    let res = g.add(contents, att)?;
    ln.apply(g, store, res, eps)
}

/// Projection-based deformable attention over per-view feature maps.
///
/// 3D offsets (tanh-bounded, world meters, shared across views) are added to
/// each query's anchor; every sample point is projected into every view and
/// bilinearly sampled where the projection lands in-image with positive
/// depth. Attention weights are softmax-normalized over the valid
/// (view, sample) pairs; a query with no valid sample aggregates zero and
/// passes through as norm(residual).
#[allow(clippy::too_many_arguments)]
pub fn deformable_cross_attention_image(
    g: &mut Graph,
    store: &ParamStore,
    lp: &LayerParams,
    cfg: &DecoderConfig,
    contents: NodeId,
    anchors: NodeId,
    features: &[Arc<Tensor>],
    cameras: &[CameraModel],
) -> Result<NodeId> {
    if features.is_empty() {
        let res = contents;
        return lp.ln_img.apply(g, store, res, cfg.ln_eps);
    }
    if features.len() != cameras.len() || features.len() != cfg.n_views {
        return Err(Error::shape("deformable attention: view count mismatch"));
    }
    let (m, _) = g.value(contents).dims2()?;
    let k_samples = cfg.deform_samples;
    let raw = mlp_forward(g, store, &lp.offset_mlp, contents)?;
    let bounded = g.tanh(raw);
    let offsets = g.scale(bounded, cfg.offset_bound);
    let logits = mlp_forward(g, store, &lp.weight_mlp, contents)?;
    let n_cols = cfg.n_views * k_samples;
    let mut mask = vec![false; m * n_cols];
    let mut samples = Vec::with_capacity(n_cols);
    for v in 0..cfg.n_views {
        let cam = Arc::new(cameras[v].clone());
        for k in 0..k_samples {
            let off = g.slice_cols(offsets, 3 * k, 3)?;
            let pt = g.add(anchors, off)?;
            let proj = g.project_to_pixel(pt, cam.clone())?;
            {
                let pv = g.value(proj);
                for i in 0..m {
                    let (u, vv, d) = (pv.at2(i, 0), pv.at2(i, 1), pv.at2(i, 2));
                    mask[i * n_cols + v * k_samples + k] =
                        d > MIN_VALID_DEPTH && cam.contains_pixel(u, vv);
                }
            }
            let uv = g.slice_cols(proj, 0, 2)?;
            let grid = g.scale(uv, 1.0 / cfg.feat_stride as f64);
            samples.push(g.bilinear_sample(grid, features[v].clone())?);
        }
    }
    let attn = g.masked_row_softmax(logits, Arc::new(mask))?;
    let mut agg: Option<NodeId> = None;
    for (col, &sample) in samples.iter().enumerate() {
        let w = g.slice_cols(attn, col, 1)?;
        let contrib = g.mul_col(sample, w)?;
        agg = Some(match agg {
            Some(a) => g.add(a, contrib)?,
            None => contrib,
        });
    }
    let agg = agg.expect("at least one (view, sample) column");
    let wv = g.param(lp.img_value_w, store.get(lp.img_value_w));
    let bv = g.param(lp.img_value_b, store.get(lp.img_value_b));
    let proj = g.matmul(agg, wv)?;
    let proj = g.add_row(proj, bv)?;
    let res = g.add(contents, proj)?;
    lp.ln_img.apply(g, store, res, cfg.ln_eps)
}

/// Pillar tokens ready for cross-attention: contents in-graph plus BEV
/// positions (plain values, used for the positional encoding).
#[derive(Debug, Clone)]
pub struct PillarTokens {
    pub contents: NodeId,
    pub positions: Tensor,
}

impl PillarTokens {
    /// Non-trainable tokens straight from a pooled pillar set.
    pub fn from_set(g: &mut Graph, set: &PillarFeatureSet) -> Self {
        PillarTokens {
            contents: g.constant(set.contents.clone()),
            positions: set.positions.clone(),
        }
    }
}

/// Vanilla multi-head attention from queries to pillar tokens; empty pillar
/// sets degrade to norm(residual).
#[allow(clippy::too_many_arguments)]
pub fn pillar_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &AttentionSpec,
    ln: &LnParams,
    contents: NodeId,
    pos: NodeId,
    pillars: Option<(NodeId, NodeId)>,
    eps: f64,
) -> Result<NodeId> {
    let Some((p_contents, p_pe)) = pillars else {
        return ln.apply(g, store, contents, eps);
    };
    let q_in = g.add(contents, pos)?;
    let k_in = g.add(p_contents, p_pe)?;
    let att = multi_head_attention(g, store, attn, q_in, k_in, p_contents)?;
    let res = g.add(contents, att)?;
    ln.apply(g, store, res, eps)
}

/// Residual refinement of the depth distribution in logit space; sampling
/// positions are untouched by construction.
pub fn calibrate_image_queries(
    g: &mut Graph,
    store: &ParamStore,
    calib: &MlpSpec,
    u: NodeId,
    img_contents: NodeId,
) -> Result<NodeId> {
    let logu = g.log_floor(u, 1e-12);
    let delta = mlp_forward(g, store, calib, img_contents)?;
    let sum = g.add(logu, delta)?;
    g.row_softmax(sum)
}

/// Classification logits and the normalized regression tensor.
///
/// `reg_norm` rows are (x, y, z, log w, log l, log h, sin rot, cos rot,
/// vx, vy) with the anchor already added to the location channels; sizes are
/// exponentiated only at decode time.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub cls: NodeId,
    pub reg_norm: NodeId,
}

pub fn output_heads(
    g: &mut Graph,
    store: &ParamStore,
    cls_head: &MlpSpec,
    reg_head: &MlpSpec,
    contents: NodeId,
    anchors: NodeId,
) -> Result<HeadOutput> {
    let cls = mlp_forward(g, store, cls_head, contents)?;
    let raw = mlp_forward(g, store, reg_head, contents)?;
    let loc = g.slice_cols(raw, 0, 3)?;
    let loc = g.add(loc, anchors)?;
    let rest = g.slice_cols(raw, 3, 7)?;
    let reg_norm = g.concat_cols(&[loc, rest])?;
    Ok(HeadOutput { cls, reg_norm })
}

/// Decode normalized regression rows into boxes with velocities.
pub fn decode_boxes(reg_norm: &Tensor) -> Result<Vec<Box3D>> {
    let (m, c) = reg_norm.dims2()?;
    if c != 10 {
        return Err(Error::shape("decode_boxes expects 10 regression channels"));
    }
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let r = reg_norm.row(i);
        out.push(Box3D::new(
            [r[0], r[1], r[2]],
            [r[3].exp(), r[4].exp(), r[5].exp()],
            r[6].atan2(r[7]),
            Some([r[8], r[9]]),
        )?);
    }
    Ok(out)
}

/// The per-query z^reg convention with positive sizes, for consumers that
/// want the tensor form rather than boxes.
pub fn decoded_regression(reg_norm: &Tensor) -> Result<Tensor> {
    let (m, c) = reg_norm.dims2()?;
    if c != 10 {
        return Err(Error::shape("decoded_regression expects 10 channels"));
    }
    let mut data = reg_norm.data().to_vec();
    for i in 0..m {
        for j in 3..6 {
            data[i * 10 + j] = data[i * 10 + j].exp();
        }
    }
    Ok(Tensor::from_raw(vec![m, 10], data))
}

/// Where a query came from; index is into that modality's detection list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    Lidar { det: usize },
    Image { view: usize, det: usize },
}

/// Fixed-capacity FIFO of top-scored past queries (grouped per frame so the
/// oldest frame is evicted whole).
#[derive(Debug, Clone, Default)]
pub struct HistoryQueue {
    pub max_frames: usize,
    pub per_frame: usize,
    frames: VecDeque<HistoryFrame>,
}

#[derive(Debug, Clone)]
pub struct HistoryFrame {
    pub timestamp: f64,
    pub ego_pose: Mat4,
    pub entries: Vec<HistoryEntry>,
}

#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub content: Vec<f64>,
    pub position: [f64; 3],
    pub score: f64,
    pub velocity: [f64; 2],
}

impl HistoryQueue {
    pub fn new(per_frame: usize, max_frames: usize) -> Self {
        HistoryQueue { max_frames, per_frame, frames: VecDeque::new() }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn n_entries(&self) -> usize {
        self.frames.iter().map(|f| f.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_entries() == 0
    }

    pub fn frames(&self) -> impl Iterator<Item = &HistoryFrame> {
        self.frames.iter()
    }

    /// Push one frame's top-K queries; evicts the oldest frame beyond the
    /// window. Entries arrive with lag 0 (their timestamp is `timestamp`).
    pub fn push_topk(&mut self, mut entries: Vec<HistoryEntry>, ego_pose: Mat4, timestamp: f64) {
        entries.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        entries.truncate(self.per_frame);
        self.frames.push_back(HistoryFrame { timestamp, ego_pose, entries });
        while self.frames.len() > self.max_frames {
            self.frames.pop_front();
        }
    }
}

/// Build top-K history entries from a finished decoder forward pass.
pub fn history_entries_from_output(g: &Graph, out: &DecoderOutput, k: usize) -> Vec<HistoryEntry> {
    let last = out.layers.last().expect("decoder ran at least one layer");
    let cls = g.value(last.heads.cls);
    let reg = g.value(last.heads.reg_norm);
    let contents = g.value(last.contents);
    let m = cls.shape()[0];
    let mut scored: Vec<(f64, usize)> = (0..m)
        .map(|i| {
            let best = cls.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (1.0 / (1.0 + (-best).exp()), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(k)
        .map(|(score, i)| HistoryEntry {
            content: contents.row(i).to_vec(),
            position: [reg.at2(i, 0), reg.at2(i, 1), reg.at2(i, 2)],
            score,
            velocity: [reg.at2(i, 8), reg.at2(i, 9)],
        })
        .collect()
}

/// Ego-motion- and velocity-compensate stored history queries into the
/// current frame and encode them as self-attention keys/values.
///
/// Contents are refined residually from a sinusoidal encoding of
/// (time lag, flattened relative pose, velocity); positions get the standard
/// PE after compensation. Frames with a corrupt (non-rigid) pose are skipped.
#[allow(clippy::too_many_arguments)]
pub fn history_transform(
    g: &mut Graph,
    store: &ParamStore,
    history_mlp: &MlpSpec,
    pe: &PeParams,
    queue: &HistoryQueue,
    current_pose: &Mat4,
    current_time: f64,
) -> Result<Option<(NodeId, NodeId)>> {
    if queue.is_empty() {
        return Ok(None);
    }
    let inv_cur = mat4_rigid_inverse(current_pose);
    let mut contents = Vec::new();
    let mut positions = Vec::new();
    let mut phi_rows = Vec::new();
    let mut width = 0;
    for frame in queue.frames() {
        if !rotation_is_orthonormal(&frame.ego_pose, 1e-6) {
            log::warn!("skipping history frame at t={}: non-rigid ego pose", frame.timestamp);
            continue;
        }
        let rel = mat4_mul(&inv_cur, &frame.ego_pose);
        let dt = current_time - frame.timestamp;
        for e in &frame.entries {
            let mut p = mat4_apply(&rel, e.position);
            let v = [
                rel[0][0] * e.velocity[0] + rel[0][1] * e.velocity[1],
                rel[1][0] * e.velocity[0] + rel[1][1] * e.velocity[1],
            ];
            p[0] += v[0] * dt;
            p[1] += v[1] * dt;
            width = e.content.len();
            contents.extend_from_slice(&e.content);
            positions.extend_from_slice(&p);
            let mut ctx = Vec::with_capacity(19);
            ctx.push(dt);
            ctx.extend_from_slice(&mat4_flatten(&rel));
            ctx.extend_from_slice(&v);
            phi_rows.extend(sinpos_encode(&ctx, pe.channels, pe.temperature)?);
        }
    }
    if contents.is_empty() {
        return Ok(None);
    }
    let n = contents.len() / width;
    let c_old = g.constant(Tensor::from_raw(vec![n, width], contents));
    let phi = g.constant(Tensor::from_raw(vec![n, 19 * pe.channels], phi_rows));
    let delta = mlp_forward(g, store, history_mlp, phi)?;
    let c_new = g.add(c_old, delta)?;
    let pos = g.constant(Tensor::from_raw(vec![n, 3], positions));
    let p_enc = encode_pe(g, store, pe, pos)?;
    let k = g.add(c_new, p_enc)?;
    Ok(Some((k, c_new)))
}

/// One decoder layer's recorded state (post-calibration for image queries).
#[derive(Debug, Clone, Copy)]
pub struct LayerRecord {
    pub contents: NodeId,
    pub anchors: NodeId,
    pub u_img: Option<NodeId>,
    pub heads: HeadOutput,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub n_pc: usize,
    pub n_img: usize,
    pub sources: Vec<QuerySource>,
    pub initial_anchors: NodeId,
    /// Sampling positions node (distribution form); bitwise untouched by the
    /// decoder.
    pub s_img: Option<NodeId>,
    pub initial_u: Option<NodeId>,
    pub layers: Vec<LayerRecord>,
}

impl DecoderOutput {
    pub fn final_layer(&self) -> &LayerRecord {
        self.layers.last().expect("decoder has at least one layer")
    }

    pub fn total_queries(&self) -> usize {
        self.n_pc + self.n_img
    }
}

/// Inputs to one decoder forward pass.
pub struct DecoderInputs<'a> {
    pub pc: Option<&'a PointCloudQuerySet>,
    pub img: Option<&'a ImageQueries>,
    pub image_features: Vec<Arc<Tensor>>,
    pub cameras: &'a [CameraModel],
    pub pillars: Option<PillarTokens>,
    pub history: Option<&'a HistoryQueue>,
    pub ego_pose: Mat4,
    pub timestamp: f64,
}

/// Run the full decoder; `None` when there are no queries at all.
pub fn run_decoder(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DecoderConfig,
    params: &DecoderParams,
    inputs: &DecoderInputs,
) -> Result<Option<DecoderOutput>> {
    cfg.validate()?;
    let n_pc = inputs.pc.map_or(0, PointCloudQuerySet::len);
    let n_img = inputs.img.map_or(0, ImageQueries::len);
    if n_pc + n_img == 0 {
        return Ok(None);
    }

    // assemble contents, static anchors/PE, and the distribution state
    let mut content_parts = Vec::new();
    let mut static_anchor_parts = Vec::new();
    let mut sources = Vec::with_capacity(n_pc + n_img);
    if let Some(pc) = inputs.pc {
        content_parts.push(pc.contents);
        static_anchor_parts.push(g.constant(pc.positions.clone()));
        sources.extend((0..pc.len()).map(|det| QuerySource::Lidar { det }));
    }
    let mut dist: Option<(NodeId, NodeId)> = None; // (s, u)
    match inputs.img {
        Some(ImageQueries::Distribution(q)) => {
            content_parts.push(q.contents);
            dist = Some((q.s_world, q.u));
            sources.extend(
                q.view_index
                    .iter()
                    .zip(&q.det_index)
                    .map(|(&view, &det)| QuerySource::Image { view, det }),
            );
        }
        Some(ImageQueries::Point(q)) => {
            content_parts.push(q.contents);
            static_anchor_parts.push(q.positions);
            sources.extend(
                q.view_index
                    .iter()
                    .zip(&q.det_index)
                    .map(|(&view, &det)| QuerySource::Image { view, det }),
            );
        }
        None => {}
    }
    let mut contents = g.concat_rows(&content_parts)?;

    let static_anchors = if static_anchor_parts.is_empty() {
        None
    } else if static_anchor_parts.len() == 1 {
        Some(static_anchor_parts[0])
    } else {
        Some(g.concat_rows(&static_anchor_parts)?)
    };
    let static_pe = match static_anchors {
        Some(a) => Some(encode_pe(g, store, &params.pe, a)?),
        None => None,
    };

    let anchors_of = |g: &mut Graph, u: NodeId, s: NodeId| g.weighted_pos_mean(u, s);
    let assemble_anchors = |g: &mut Graph, img_anchor: Option<NodeId>| -> Result<NodeId> {
        match (static_anchors, img_anchor) {
            (Some(sa), Some(ia)) => g.concat_rows(&[sa, ia]),
            (Some(sa), None) => Ok(sa),
            (None, Some(ia)) => Ok(ia),
            (None, None) => unreachable!("some queries exist"),
        }
    };
    let assemble_pos = |g: &mut Graph, img_pe: Option<NodeId>| -> Result<NodeId> {
        match (static_pe, img_pe) {
            (Some(sp), Some(ip)) => g.concat_rows(&[sp, ip]),
            (Some(sp), None) => Ok(sp),
            (None, Some(ip)) => Ok(ip),
            (None, None) => unreachable!(),
        }
    };

    let mut u_cur = dist.map(|(_, u)| u);
    let mut img_anchor = match dist {
        Some((s, u)) => Some(anchors_of(g, u, s)?),
        None => None,
    };
    let mut img_pe = match (dist, u_cur) {
        (Some((s, _)), Some(u)) => Some(encode_upe(g, store, &params.upe, s, u)?),
        _ => None,
    };
    let initial_anchors = assemble_anchors(g, img_anchor)?;

    // pillar tokens and their (static) positional encoding
    let pillar_kv = match &inputs.pillars {
        Some(p) if p.positions.shape()[0] > 0 => {
            let pos = g.constant(p.positions.clone());
            let enc = g.sinpos(pos, params.pe.channels, params.pe.temperature)?;
            let pe = mlp_forward(g, store, &params.pillar_pe, enc)?;
            Some((p.contents, pe))
        }
        _ => None,
    };

    let history_kv = match inputs.history {
        Some(q) => history_transform(
            g,
            store,
            &params.history_mlp,
            &params.pe,
            q,
            &inputs.ego_pose,
            inputs.timestamp,
        )?,
        None => None,
    };

    let mut records = Vec::with_capacity(cfg.layers);
    let mut anchors_cur = initial_anchors;
    for lp in &params.layers {
        let pos = assemble_pos(g, img_pe)?;
        contents = self_attention_layer(g, store, &lp.self_attn, &lp.ln_self, contents, pos, history_kv, cfg.ln_eps)?;
        if cfg.use_cross_attention {
            contents = deformable_cross_attention_image(
                g,
                store,
                lp,
                cfg,
                contents,
                anchors_cur,
                &inputs.image_features,
                inputs.cameras,
            )?;
            contents = pillar_cross_attention(
                g,
                store,
                &lp.pillar_attn,
                &lp.ln_pillar,
                contents,
                pos,
                pillar_kv,
                cfg.ln_eps,
            )?;
        }
        let ff = mlp_forward(g, store, &lp.ffn, contents)?;
        let res = g.add(contents, ff)?;
        contents = lp.ln_ffn.apply(g, store, res, cfg.ln_eps)?;

        // calibrate image-query depth distributions from the updated
        // contents; positional encodings and anchors follow immediately
        if let (Some((s, _)), Some(u)) = (dist, u_cur) {
            let img_contents = g.slice_rows(contents, n_pc, n_img)?;
            let u_new = calibrate_image_queries(g, store, &lp.calib, u, img_contents)?;
            u_cur = Some(u_new);
            img_anchor = Some(anchors_of(g, u_new, s)?);
            img_pe = Some(encode_upe(g, store, &params.upe, s, u_new)?);
            anchors_cur = assemble_anchors(g, img_anchor)?;
        }
        let heads = output_heads(g, store, &params.cls_head, &params.reg_head, contents, anchors_cur)?;
        records.push(LayerRecord { contents, anchors: anchors_cur, u_img: u_cur, heads });
    }

    Ok(Some(DecoderOutput {
        n_pc,
        n_img,
        sources,
        initial_anchors,
        s_img: dist.map(|(s, _)| s),
        initial_u: dist.map(|(_, u)| u),
        layers: records
            .iter()
            .map(|r| LayerRecord { contents: r.contents, anchors: r.anchors, u_img: r.u_img, heads: r.heads })
            .collect(),
    }))
}
