//! Modality-specific object-query generation.
//!
//! Point-cloud queries pair a content vector with the detected 3D center;
//! image queries keep the depth ambiguity explicit as a categorical
//! distribution over sampling positions along each detection's pixel rays.
//! A point-formulation image variant (single estimated 3D center per
//! detection) exists for the ablation grid.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{equivalent_intrinsics, mat4_rigid_inverse, roi_align, Box2D, Box3D, CameraModel, Mat4};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::nn::{mlp_forward, MlpSpec, ParamStore};
use crate::numerics::tensor::{sinpos_encode, Tensor};
use crate::scenesim::{Detection2D, Detections3D};

/// Uniformly spaced depth hypotheses, inclusive of both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub values: Vec<f64>,
}

pub fn make_depth_bins(d_min: f64, d_max: f64, n_d: usize) -> Result<DepthBins> {
    if n_d < 2 {
        return Err(Error::config("depth bins need at least 2 values"));
    }
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(Error::config(format!("bad depth range [{d_min}, {d_max}]")));
    }
    let step = (d_max - d_min) / (n_d - 1) as f64;
    let values = (0..n_d).map(|i| d_min + step * i as f64).collect();
    Ok(DepthBins { d_min, d_max, values })
}

impl DepthBins {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the bin nearest to a depth, clamped to the range.
    pub fn nearest_bin(&self, depth: f64) -> usize {
        let step = (self.d_max - self.d_min) / (self.values.len() - 1) as f64;
        (((depth - self.d_min) / step).round().max(0.0) as usize).min(self.values.len() - 1)
    }
}

/// Stable top-k indices by (score desc, input index asc).
pub fn top_k_by_score(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Parameters of the point-cloud query generator.
#[derive(Debug, Clone)]
pub struct PcQueryGenParams {
    /// SinPos(box params) -> appearance width.
    pub inner: MlpSpec,
    /// Fused appearance -> content width.
    pub outer: MlpSpec,
    /// num_classes x C learnable appearance embedding slot.
    pub class_embed: usize,
    pub sinpos_channels: usize,
    pub temperature: f64,
    pub cap: usize,
}

impl PcQueryGenParams {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        width: usize,
        num_classes: usize,
        sinpos_channels: usize,
        hidden: usize,
        cap: usize,
    ) -> Result<Self> {
        let inner = MlpSpec::build(store, rng, "pc_query.inner", &[7 * sinpos_channels, hidden, width])?;
        let outer = MlpSpec::build(store, rng, "pc_query.outer", &[width, hidden, width])?;
        let class_embed = store.add(
            "pc_query.class_embed",
            crate::numerics::nn::glorot_uniform(rng, num_classes, width),
        );
        Ok(PcQueryGenParams {
            inner,
            outer,
            class_embed,
            sinpos_channels,
            temperature: 10000.0,
            cap,
        })
    }
}

/// Point-cloud object queries: content vectors plus 3D center positions.
#[derive(Debug, Clone)]
pub struct PointCloudQuerySet {
    /// M x C contents in the graph.
    pub contents: NodeId,
    /// M x C appearance features (embedding + noise) in the graph.
    pub appearance: NodeId,
    /// M x 3 centers, plain values (positions are data, not parameters).
    pub positions: Tensor,
    pub boxes: Vec<Box3D>,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

impl PointCloudQuerySet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Build point-cloud queries from oracle 3D detections:
/// content = MLP(o + MLP(SinPos(box params))), position = box center.
pub fn gen_pc_queries(
    g: &mut Graph,
    store: &ParamStore,
    params: &PcQueryGenParams,
    dets: &Detections3D,
) -> Result<Option<PointCloudQuerySet>> {
    let (rows, feat_dim) = dets.feature_noise.dims2()?;
    if rows != dets.dets.len() {
        return Err(Error::shape("gen_pc_queries: appearance rows must match detections"));
    }
    if dets.dets.is_empty() {
        return Ok(None);
    }
    let scores: Vec<f64> = dets.dets.iter().map(|d| d.score).collect();
    let keep = top_k_by_score(&scores, params.cap);
    let m = keep.len();

    let mut sin_rows = Vec::with_capacity(m * 7 * params.sinpos_channels);
    let mut noise_rows = Vec::with_capacity(m * feat_dim);
    let mut positions = Vec::with_capacity(m * 3);
    let mut boxes = Vec::with_capacity(m);
    let mut classes = Vec::with_capacity(m);
    let mut kept_scores = Vec::with_capacity(m);
    for &i in &keep {
        let det = &dets.dets[i];
        sin_rows.extend(sinpos_encode(&det.bbox.params7(), params.sinpos_channels, params.temperature)?);
        noise_rows.extend_from_slice(dets.feature_noise.row(i));
        positions.extend_from_slice(&det.bbox.center);
        boxes.push(det.bbox);
        classes.push(det.class);
        kept_scores.push(det.score);
    }
    let sin = g.constant(Tensor::from_raw(vec![m, 7 * params.sinpos_channels], sin_rows));
    let geo = mlp_forward(g, store, &params.inner, sin)?;
    let embed = g.param(params.class_embed, store.get(params.class_embed));
    let embed_rows = g.gather_rows(embed, Arc::new(classes.clone()))?;
    let noise = g.constant(Tensor::from_raw(vec![m, feat_dim], noise_rows));
    let appearance = g.add(embed_rows, noise)?;
    let fused = g.add(appearance, geo)?;
    let contents = mlp_forward(g, store, &params.outer, fused)?;
    Ok(Some(PointCloudQuerySet {
        contents,
        appearance,
        positions: Tensor::from_raw(vec![m, 3], positions),
        boxes,
        scores: kept_scores,
        classes,
    }))
}

/// Image query formulation: the depth-distribution form from the fusion
/// design, or the single-point baseline used in the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageQueryForm {
    Distribution,
    Point,
}

/// Parameters of the image query generator.
#[derive(Debug, Clone)]
pub struct ImgQueryGenParams {
    /// 1x1 channel-mixing conv over RoI features: (feat_channels x C, C).
    pub conv_w: usize,
    pub conv_b: usize,
    /// [pooled conv ; flattened equivalent intrinsics] -> content.
    pub content: MlpSpec,
    /// Distribution head: content -> n_d x 2 sampling offsets + n_d logits;
    /// point head: content -> (2 offsets + 1 depth logit).
    pub head: MlpSpec,
    pub form: ImageQueryForm,
    pub roi: (usize, usize),
    pub feat_channels: usize,
    pub stride: usize,
    pub n_d: usize,
    pub cap_per_view: usize,
    /// Fixed divisor for the flattened intrinsics entries.
    pub intrinsics_scale: f64,
}

impl ImgQueryGenParams {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        width: usize,
        feat_channels: usize,
        stride: usize,
        n_d: usize,
        hidden: usize,
        cap_per_view: usize,
        form: ImageQueryForm,
    ) -> Result<Self> {
        let conv_w = store.add("img_query.conv.w", crate::numerics::nn::glorot_uniform(rng, feat_channels, width));
        let conv_b = store.add("img_query.conv.b", Tensor::zeros(&[width]));
        let content = MlpSpec::build(store, rng, "img_query.content", &[width + 8, hidden, width])?;
        let head_out = match form {
            ImageQueryForm::Distribution => 3 * n_d,
            ImageQueryForm::Point => 3,
        };
        let head = MlpSpec::build(store, rng, "img_query.head", &[width, hidden, head_out])?;
        Ok(ImgQueryGenParams {
            conv_w,
            conv_b,
            content,
            head,
            form,
            roi: (7, 7),
            feat_channels,
            stride,
            n_d,
            cap_per_view,
            intrinsics_scale: 1000.0,
        })
    }
}

/// Uncertainty-aware image queries: contents, world-frame sampling positions
/// along each detection's pixel rays, and per-bin probabilities.
#[derive(Debug, Clone)]
pub struct ImageQuerySet {
    /// M x C contents.
    pub contents: NodeId,
    /// M x (n_d * 3) world sampling positions, (x, y, z) per bin.
    pub s_world: NodeId,
    /// M x n_d probabilities (initial distribution from the generator).
    pub u: NodeId,
    pub n_d: usize,
    pub boxes: Vec<Box2D>,
    pub view_index: Vec<usize>,
    pub equiv_intrinsics: Vec<Mat4>,
    pub scores: Vec<f64>,
    /// Index of the source detection within its view's detection list.
    pub det_index: Vec<usize>,
}

impl ImageQuerySet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Point-formulation image queries: a single estimated 3D center each.
#[derive(Debug, Clone)]
pub struct PointImageQuerySet {
    pub contents: NodeId,
    /// M x 3 predicted world positions (parameter-dependent).
    pub positions: NodeId,
    /// M x 1 predicted camera-frame depths (for auxiliary supervision).
    pub depths: NodeId,
    pub boxes: Vec<Box2D>,
    pub view_index: Vec<usize>,
    pub equiv_intrinsics: Vec<Mat4>,
    pub scores: Vec<f64>,
    pub det_index: Vec<usize>,
}

impl PointImageQuerySet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Either image-query formulation.
#[derive(Debug, Clone)]
pub enum ImageQueries {
    Distribution(ImageQuerySet),
    Point(PointImageQuerySet),
}

impl ImageQueries {
    pub fn len(&self) -> usize {
        match self {
            ImageQueries::Distribution(q) => q.len(),
            ImageQueries::Point(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct ViewSelection {
    boxes: Vec<Box2D>,
    scores: Vec<f64>,
    det_index: Vec<usize>,
    equiv: Vec<Mat4>,
}

fn select_view_detections(
    dets: &[Detection2D],
    cam: &CameraModel,
    roi: (usize, usize),
    cap: usize,
) -> Result<ViewSelection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let keep = top_k_by_score(&scores, cap);
    let mut sel = ViewSelection { boxes: vec![], scores: vec![], det_index: vec![], equiv: vec![] };
    for &i in &keep {
        let b = dets[i].bbox;
        // a detection fully outside the image is skipped, not an error
        if b.x_max <= 0.0 || b.y_max <= 0.0 || b.x_min >= cam.width || b.y_min >= cam.height {
            continue;
        }
        sel.equiv.push(equivalent_intrinsics(cam, &b, roi)?);
        sel.boxes.push(b);
        sel.scores.push(dets[i].score);
        sel.det_index.push(i);
    }
    Ok(sel)
}

/// Shared front half of both image-query forms: RoI features -> 1x1 conv ->
/// global average pool -> concat flattened equivalent intrinsics -> content.
fn image_contents(
    g: &mut Graph,
    store: &ParamStore,
    params: &ImgQueryGenParams,
    features: &Tensor,
    cam: &CameraModel,
    sel: &ViewSelection,
) -> Result<NodeId> {
    let m = sel.boxes.len();
    let (wr, hr) = params.roi;
    let cells = wr * hr;
    let mut roi_rows = Vec::with_capacity(m * cells * params.feat_channels);
    for b in &sel.boxes {
        let fb = Box2D {
            x_min: b.x_min / params.stride as f64,
            y_min: b.y_min / params.stride as f64,
            x_max: b.x_max / params.stride as f64,
            y_max: b.y_max / params.stride as f64,
        };
        let roi = roi_align(features, &fb, params.roi)?;
        roi_rows.extend_from_slice(roi.data());
    }
    let roi = g.constant(Tensor::from_raw(vec![m * cells, params.feat_channels], roi_rows));
    let cw = g.param(params.conv_w, store.get(params.conv_w));
    let cb = g.param(params.conv_b, store.get(params.conv_b));
    let conv = g.matmul(roi, cw)?;
    let conv = g.add_row(conv, cb)?;
    let groups: Vec<Vec<usize>> = (0..m).map(|i| (i * cells..(i + 1) * cells).collect()).collect();
    let pooled = g.group_mean_rows(conv, Arc::new(groups))?;
    // the 8 informative intrinsics entries, scale-normalized
    let mut flat = Vec::with_capacity(m * 8);
    for k in &sel.equiv {
        for v in [k[0][0], k[1][1], k[0][2], k[1][2], cam.width, cam.height, wr as f64, hr as f64] {
            flat.push(v / params.intrinsics_scale);
        }
    }
    let flat = g.constant(Tensor::from_raw(vec![m, 8], flat));
    let fused = g.concat_cols(&[pooled, flat])?;
    mlp_forward(g, store, &params.content, fused)
}

/// Map head outputs in (0,1)^2 into each detection box, in image pixels.
/// `per_row` is the number of (x, y) pairs per query.
fn squash_into_boxes(
    g: &mut Graph,
    raw: NodeId,
    boxes: &[Box2D],
    per_row: usize,
) -> Result<NodeId> {
    let m = boxes.len();
    let sig = g.sigmoid(raw);
    let mut scale = Vec::with_capacity(m * per_row * 2);
    let mut offset = Vec::with_capacity(m * per_row * 2);
    for b in boxes {
        for _ in 0..per_row {
            scale.push(b.width());
            scale.push(b.height());
            offset.push(b.x_min);
            offset.push(b.y_min);
        }
    }
    let scale = g.constant(Tensor::from_raw(vec![m, per_row * 2], scale));
    let offset = g.constant(Tensor::from_raw(vec![m, per_row * 2], offset));
    let pix = g.mul(sig, scale)?;
    g.add(pix, offset)
}

/// Build uncertainty-aware image queries for every view and aggregate them.
///
/// `detections` and `features` are per-view; an empty detection list yields
/// no queries for that view (and `None` when every view is empty).
pub fn gen_img_queries(
    g: &mut Graph,
    store: &ParamStore,
    params: &ImgQueryGenParams,
    detections: &[Vec<Detection2D>],
    features: &[Tensor],
    cameras: &[CameraModel],
    bins: &DepthBins,
) -> Result<Option<ImageQueries>> {
    if params.form == ImageQueryForm::Point {
        return gen_img_queries_point(g, store, params, detections, features, cameras, bins)
            .map(|o| o.map(ImageQueries::Point));
    }
    let n_d = params.n_d;
    if bins.len() != n_d {
        return Err(Error::config("depth bin count does not match the generator"));
    }
    let mut parts_content = Vec::new();
    let mut parts_s = Vec::new();
    let mut parts_u = Vec::new();
    let mut out = ImageQuerySet {
        contents: 0,
        s_world: 0,
        u: 0,
        n_d,
        boxes: vec![],
        view_index: vec![],
        equiv_intrinsics: vec![],
        scores: vec![],
        det_index: vec![],
    };
    for (v, dets) in detections.iter().enumerate() {
        let cam = &cameras[v];
        let sel = select_view_detections(dets, cam, params.roi, params.cap_per_view)?;
        let m = sel.boxes.len();
        if m == 0 {
            continue;
        }
        let contents = image_contents(g, store, params, &features[v], cam, &sel)?;
        let head = mlp_forward(g, store, &params.head, contents)?;
        let s2d_raw = g.slice_cols(head, 0, 2 * n_d)?;
        let u_logit = g.slice_cols(head, 2 * n_d, n_d)?;
        let u = g.row_softmax(u_logit)?;
        let pix = squash_into_boxes(g, s2d_raw, &sel.boxes, n_d)?;
        let pix_flat = g.reshape(pix, vec![m * n_d, 2])?;
        let mut depths = Vec::with_capacity(m * n_d);
        for _ in 0..m {
            depths.extend_from_slice(&bins.values);
        }
        let world = g.unproject_at_depth(pix_flat, Arc::new(cam.clone()), Arc::new(depths))?;
        let s_world = g.reshape(world, vec![m, 3 * n_d])?;
        parts_content.push(contents);
        parts_s.push(s_world);
        parts_u.push(u);
        out.boxes.extend(sel.boxes);
        out.view_index.extend(std::iter::repeat_n(v, m));
        out.equiv_intrinsics.extend(sel.equiv);
        out.scores.extend(sel.scores);
        out.det_index.extend(sel.det_index);
    }
    if parts_content.is_empty() {
        return Ok(None);
    }
    out.contents = g.concat_rows(&parts_content)?;
    out.s_world = g.concat_rows(&parts_s)?;
    out.u = g.concat_rows(&parts_u)?;
    Ok(Some(ImageQueries::Distribution(out)))
}

fn gen_img_queries_point(
    g: &mut Graph,
    store: &ParamStore,
    params: &ImgQueryGenParams,
    detections: &[Vec<Detection2D>],
    features: &[Tensor],
    cameras: &[CameraModel],
    bins: &DepthBins,
) -> Result<Option<PointImageQuerySet>> {
    let mut parts_content = Vec::new();
    let mut parts_pos = Vec::new();
    let mut parts_depth = Vec::new();
    let mut out = PointImageQuerySet {
        contents: 0,
        positions: 0,
        depths: 0,
        boxes: vec![],
        view_index: vec![],
        equiv_intrinsics: vec![],
        scores: vec![],
        det_index: vec![],
    };
    for (v, dets) in detections.iter().enumerate() {
        let cam = &cameras[v];
        let sel = select_view_detections(dets, cam, params.roi, params.cap_per_view)?;
        let m = sel.boxes.len();
        if m == 0 {
            continue;
        }
        let contents = image_contents(g, store, params, &features[v], cam, &sel)?;
        let head = mlp_forward(g, store, &params.head, contents)?;
        let s2d_raw = g.slice_cols(head, 0, 2)?;
        let d_logit = g.slice_cols(head, 2, 1)?;
        let d_sig = g.sigmoid(d_logit);
        let d_scaled = g.scale(d_sig, bins.d_max - bins.d_min);
        let d_off = g.constant(Tensor::full(&[m, 1], bins.d_min));
        let depth = g.add(d_scaled, d_off)?;
        let pix = squash_into_boxes(g, s2d_raw, &sel.boxes, 1)?;
        // camera-frame point: ((u - ox)/fx * d, (v - oy)/fy * d, d)
        let off = g.constant(Tensor::from_raw(
            vec![m, 2],
            (0..m).flat_map(|_| [cam.ox, cam.oy]).collect(),
        ));
        let centered = g.sub(pix, off)?;
        let norm = g.constant(Tensor::from_raw(
            vec![m, 2],
            (0..m).flat_map(|_| [1.0 / cam.fx, 1.0 / cam.fy]).collect(),
        ));
        let dir = g.mul(centered, norm)?;
        let depth2 = g.concat_cols(&[depth, depth])?;
        let xy = g.mul(dir, depth2)?;
        let cam_pt = g.concat_cols(&[xy, depth])?;
        // camera -> world: world = R^T pc + t_inv
        let inv = mat4_rigid_inverse(&cam.extrinsic);
        let mut rot = Vec::with_capacity(9);
        for j in 0..3 {
            for i in 0..3 {
                rot.push(inv[i][j]); // transposed for row-vector matmul
            }
        }
        let rot = g.constant(Tensor::from_raw(vec![3, 3], rot));
        let tr = g.constant(Tensor::from_raw(vec![3], vec![inv[0][3], inv[1][3], inv[2][3]]));
        let world = g.matmul(cam_pt, rot)?;
        let world = g.add_row(world, tr)?;
        parts_content.push(contents);
        parts_pos.push(world);
        parts_depth.push(depth);
        out.boxes.extend(sel.boxes);
        out.view_index.extend(std::iter::repeat_n(v, m));
        out.equiv_intrinsics.extend(sel.equiv);
        out.scores.extend(sel.scores);
        out.det_index.extend(sel.det_index);
    }
    if parts_content.is_empty() {
        return Ok(None);
    }
    out.contents = g.concat_rows(&parts_content)?;
    out.positions = g.concat_rows(&parts_pos)?;
    out.depths = g.concat_rows(&parts_depth)?;
    Ok(Some(out))
}

/// Probability-weighted mean of one query's sampling positions.
pub fn anchor_from_distribution(s_row: &[f64], u_row: &[f64]) -> Result<[f64; 3]> {
    if s_row.len() != 3 * u_row.len() || u_row.is_empty() {
        return Err(Error::shape("anchor_from_distribution: s row must be 3x the u row"));
    }
    let sum: f64 = u_row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!("distribution sums to {sum}, not 1")));
    }
    let mut out = [0.0; 3];
    for (j, &w) in u_row.iter().enumerate() {
        for c in 0..3 {
            out[c] += w * s_row[3 * j + c];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_world_to_pixel;
    use crate::scenesim::{
        generate_sequence, oracle_detect_2d, oracle_detect_3d, synthesize_image_features, Detection3D,
        OracleConfig, SceneConfig,
    };
    use rand::SeedableRng;

    #[test]
    fn depth_bins_basic_cases() {
        let b = make_depth_bins(1.0, 7.0, 3).unwrap();
        assert_eq!(b.values, vec![1.0, 4.0, 7.0]);
        let b = make_depth_bins(2.5, 9.0, 2).unwrap();
        assert_eq!(b.values, vec![2.5, 9.0]);
        let b = make_depth_bins(1.0, 60.0, 16).unwrap();
        assert_eq!(b.values.len(), 16);
        let gap = 59.0 / 15.0;
        for w in b.values.windows(2) {
            assert!((w[1] - w[0] - gap).abs() < 1e-12);
        }
        assert!(make_depth_bins(0.0, 5.0, 4).is_err());
        assert!(make_depth_bins(5.0, 1.0, 4).is_err());
        assert!(make_depth_bins(1.0, 5.0, 1).is_err());
    }

    #[test]
    fn nearest_bin_clamps_to_range() {
        let b = make_depth_bins(1.0, 7.0, 4).unwrap(); // 1, 3, 5, 7
        assert_eq!(b.nearest_bin(0.1), 0);
        assert_eq!(b.nearest_bin(3.9), 1);
        assert_eq!(b.nearest_bin(4.1), 2);
        assert_eq!(b.nearest_bin(99.0), 3);
    }

    fn fake_dets3d(n: usize, feat_dim: usize) -> Detections3D {
        let dets = (0..n)
            .map(|i| Detection3D {
                bbox: Box3D::new(
                    [i as f64, -(i as f64) * 0.5, 0.8],
                    [1.9, 4.5, 1.6],
                    0.1 * i as f64,
                    None,
                )
                .unwrap(),
                score: (i as f64 * 7919.0 % 997.0) / 997.0,
                class: i % 3,
                gt_index: i,
            })
            .collect();
        Detections3D { dets, feature_noise: Tensor::zeros(&[n, feat_dim]) }
    }

    fn pc_params(store: &mut ParamStore, width: usize, cap: usize) -> PcQueryGenParams {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        PcQueryGenParams::build(store, &mut rng, width, 3, 4, width, cap).unwrap()
    }

    #[test]
    fn pc_queries_keep_top_200_by_score() {
        let mut store = ParamStore::new();
        let params = pc_params(&mut store, 8, 200);
        let dets = fake_dets3d(350, 8);
        let mut g = Graph::new();
        let qs = gen_pc_queries(&mut g, &store, &params, &dets).unwrap().unwrap();
        assert_eq!(qs.len(), 200);
        let mut expect: Vec<usize> = (0..350).collect();
        expect.sort_by(|&a, &b| {
            dets.dets[b].score.partial_cmp(&dets.dets[a].score).unwrap().then(a.cmp(&b))
        });
        let min_kept = expect[..200].iter().map(|&i| dets.dets[i].score).fold(f64::INFINITY, f64::min);
        assert!(qs.scores.iter().all(|&s| s >= min_kept));
        // positions equal source box centers
        for (i, b) in qs.boxes.iter().enumerate() {
            assert_eq!(qs.positions.row(i), &b.center);
        }
    }

    #[test]
    fn pc_queries_zero_mlps_collapse_to_outer_bias() {
        let mut store = ParamStore::new();
        let mut params = pc_params(&mut store, 6, 10);
        params.inner = MlpSpec::build_zeroed(&mut store, "zi", &[7 * 4, 6, 6]).unwrap();
        params.outer = MlpSpec::build_zeroed(&mut store, "zo", &[6, 6, 6]).unwrap();
        store.set(params.class_embed, Tensor::zeros(&[3, 6]));
        let dets = fake_dets3d(4, 6);
        let mut g = Graph::new();
        let qs = gen_pc_queries(&mut g, &store, &params, &dets).unwrap().unwrap();
        assert!(g.value(qs.contents).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pc_query_contents_match_hand_composition() {
        // single-affine inner/outer with fixed weights; oracle composed by hand
        let width = 3;
        let ch = 2;
        let mut store = ParamStore::new();
        let inner = MlpSpec::build_zeroed(&mut store, "i", &[7 * ch, width]).unwrap();
        let outer = MlpSpec::build_zeroed(&mut store, "o", &[width, width]).unwrap();
        let iw: Vec<f64> = (0..7 * ch * width).map(|i| ((i % 5) as f64 - 2.0) * 0.1).collect();
        store.set(inner.layers[0].0, Tensor::new(vec![7 * ch, width], iw.clone()).unwrap());
        store.set(inner.layers[0].1, Tensor::new(vec![width], vec![0.05, -0.1, 0.2]).unwrap());
        let ow: Vec<f64> = (0..width * width).map(|i| ((i % 3) as f64) * 0.25 - 0.25).collect();
        store.set(outer.layers[0].0, Tensor::new(vec![width, width], ow.clone()).unwrap());
        let embed = store.add("e", Tensor::new(vec![3, width], (0..9).map(|v| v as f64 * 0.1).collect()).unwrap());
        let params = PcQueryGenParams {
            inner,
            outer,
            class_embed: embed,
            sinpos_channels: ch,
            temperature: 100.0,
            cap: 10,
        };
        let mut dets = fake_dets3d(1, width);
        dets.dets[0].class = 2;
        dets.feature_noise = Tensor::new(vec![1, width], vec![0.3, -0.2, 0.1]).unwrap();
        let mut g = Graph::new();
        let qs = gen_pc_queries(&mut g, &store, &params, &dets).unwrap().unwrap();
        // oracle
        let sp = sinpos_encode(&dets.dets[0].bbox.params7(), ch, 100.0).unwrap();
        let mut geo = [0.05, -0.1, 0.2];
        for (r, &s) in sp.iter().enumerate() {
            for c in 0..width {
                geo[c] += s * iw[r * width + c];
            }
        }
        // class-2 embedding row is [0.6, 0.7, 0.8]; noise [0.3, -0.2, 0.1]
        let o = [0.9, 0.5, 0.9];
        let fused: Vec<f64> = (0..width).map(|c| geo[c] + o[c]).collect();
        let mut expect = [0.0; 3];
        for r in 0..width {
            for c in 0..width {
                expect[c] += fused[r] * ow[r * width + c];
            }
        }
        for c in 0..width {
            assert!(
                (g.value(qs.contents).at2(0, c) - expect[c]).abs() < 1e-12,
                "channel {c}: {} vs {}",
                g.value(qs.contents).at2(0, c),
                expect[c]
            );
        }
    }

    #[test]
    fn pc_queries_permutation_equivariant() {
        let mut store = ParamStore::new();
        let params = pc_params(&mut store, 8, 100);
        let dets = fake_dets3d(6, 8);
        let mut g1 = Graph::new();
        let q1 = gen_pc_queries(&mut g1, &store, &params, &dets).unwrap().unwrap();
        // reversed input order
        let rev = Detections3D {
            dets: dets.dets.iter().rev().cloned().collect(),
            feature_noise: Tensor::from_rows(
                &(0..6).rev().map(|i| dets.feature_noise.row(i).to_vec()).collect::<Vec<_>>(),
            )
            .unwrap(),
        };
        let mut g2 = Graph::new();
        let q2 = gen_pc_queries(&mut g2, &store, &params, &rev).unwrap().unwrap();
        // same queries, matched by source score
        for i in 0..q1.len() {
            let j = q2.scores.iter().position(|&s| s == q1.scores[i]).unwrap();
            assert_eq!(g1.value(q1.contents).row(i), g2.value(q2.contents).row(j));
            assert_eq!(q1.positions.row(i), q2.positions.row(j));
        }
    }

    fn scene_fixture() -> (SceneConfig, crate::scenesim::SceneFrame, OracleConfig) {
        let mut cfg = SceneConfig::desk_short_range();
        cfg.n_objects_min = 6;
        cfg.n_objects_max = 6;
        cfg.seed = 11;
        cfg.frames_per_sequence = 1;
        let frame = generate_sequence(&cfg, 0).unwrap().remove(0);
        let oc = OracleConfig::desk_default(16);
        (cfg, frame, oc)
    }

    fn img_fixture(
        store: &mut ParamStore,
        cfg: &SceneConfig,
        frame: &crate::scenesim::SceneFrame,
        oc: &OracleConfig,
        form: ImageQueryForm,
        n_d: usize,
    ) -> (ImgQueryGenParams, Vec<Vec<Detection2D>>, Vec<Tensor>, DepthBins) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feat_channels = 4 + cfg.class_count;
        let params =
            ImgQueryGenParams::build(store, &mut rng, 8, feat_channels, 8, n_d, 8, 60, form).unwrap();
        let mut dets = Vec::new();
        let mut feats = Vec::new();
        for v in 0..frame.cameras.len() {
            let mut orng = ChaCha8Rng::seed_from_u64(100 + v as u64);
            dets.push(oracle_detect_2d(frame, v, oc, &mut orng));
            feats.push(synthesize_image_features(frame, v, 8, cfg.class_count));
        }
        let bins = make_depth_bins(1.0, 60.0, n_d).unwrap();
        (params, dets, feats, bins)
    }

    #[test]
    fn img_queries_cap_at_60_per_view() {
        let (cfg, frame, oc) = scene_fixture();
        let mut store = ParamStore::new();
        let (params, _, feats, bins) = img_fixture(&mut store, &cfg, &frame, &oc, ImageQueryForm::Distribution, 4);
        // inflate one view to 80 detections
        let mut dets: Vec<Vec<Detection2D>> = vec![Vec::new(); frame.cameras.len()];
        for i in 0..80 {
            dets[0].push(Detection2D {
                bbox: Box2D::new(5.0 + i as f64, 10.0, 30.0 + i as f64, 40.0).unwrap(),
                score: (i as f64 * 13.0 % 71.0) / 71.0,
                class: 0,
                gt_index: 0,
            });
        }
        let mut g = Graph::new();
        let qs = gen_img_queries(&mut g, &store, &params, &dets, &feats, &frame.cameras, &bins)
            .unwrap()
            .unwrap();
        assert_eq!(qs.len(), 60);
        match qs {
            ImageQueries::Distribution(q) => {
                let mut sorted = q.scores.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let all: Vec<f64> = dets[0].iter().map(|d| d.score).collect();
                let mut all_sorted = all.clone();
                all_sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                assert_eq!(&sorted[..], &all_sorted[..60]);
            }
            ImageQueries::Point(_) => panic!("expected distribution form"),
        }
    }

    #[test]
    fn img_queries_zero_head_gives_uniform_u_and_ray_points() {
        let (cfg, frame, oc) = scene_fixture();
        let n_d = 5;
        let mut store = ParamStore::new();
        let (mut params, dets, feats, bins) =
            img_fixture(&mut store, &cfg, &frame, &oc, ImageQueryForm::Distribution, n_d);
        params.head = MlpSpec::build_zeroed(&mut store, "zh", &[8, 8, 3 * n_d]).unwrap();
        let mut g = Graph::new();
        let Some(ImageQueries::Distribution(q)) =
            gen_img_queries(&mut g, &store, &params, &dets, &feats, &frame.cameras, &bins).unwrap()
        else {
            panic!("no image queries generated");
        };
        let u = g.value(q.u);
        for i in 0..q.len() {
            for j in 0..n_d {
                assert!((u.at2(i, j) - 1.0 / n_d as f64).abs() < 1e-12);
            }
        }
        let s = g.value(q.s_world);
        for i in 0..q.len() {
            let b = &q.boxes[i];
            let (cx, cy) = b.center();
            let cam = &frame.cameras[q.view_index[i]];
            for (j, &d) in bins.values.iter().enumerate() {
                let expect = crate::geometry::unproject_pixel_at_depth(cam, (cx, cy), d).unwrap();
                for c in 0..3 {
                    assert!((s.at2(i, 3 * j + c) - expect[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn img_query_invariants_hold_for_random_params() {
        let (cfg, frame, oc) = scene_fixture();
        let n_d = 6;
        for seed in 0..8u64 {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feat_channels = 4 + cfg.class_count;
            let params = ImgQueryGenParams::build(
                &mut store, &mut rng, 8, feat_channels, 8, n_d, 8, 60, ImageQueryForm::Distribution,
            )
            .unwrap();
            let mut dets = Vec::new();
            let mut feats = Vec::new();
            for v in 0..frame.cameras.len() {
                let mut orng = ChaCha8Rng::seed_from_u64(seed * 31 + v as u64);
                dets.push(oracle_detect_2d(&frame, v, &oc, &mut orng));
                feats.push(synthesize_image_features(&frame, v, 8, cfg.class_count));
            }
            let bins = make_depth_bins(1.0, 60.0, n_d).unwrap();
            let mut g = Graph::new();
            let Some(ImageQueries::Distribution(q)) =
                gen_img_queries(&mut g, &store, &params, &dets, &feats, &frame.cameras, &bins).unwrap()
            else {
                continue;
            };
            let u = g.value(q.u);
            let s = g.value(q.s_world);
            for i in 0..q.len() {
                // u rows: non-negative, sum 1
                let mut sum = 0.0;
                for j in 0..n_d {
                    assert!(u.at2(i, j) >= 0.0);
                    sum += u.at2(i, j);
                }
                assert!((sum - 1.0).abs() < 1e-9);
                // every sampling position projects back onto its own pixel ray
                let cam = &frame.cameras[q.view_index[i]];
                for (j, &d) in bins.values.iter().enumerate() {
                    let p = [s.at2(i, 3 * j), s.at2(i, 3 * j + 1), s.at2(i, 3 * j + 2)];
                    let proj = project_world_to_pixel(cam, p);
                    assert!(proj.valid);
                    assert!((proj.depth - d).abs() < 1e-9, "bin depth drifted");
                    // inside the detection box (squashing keeps evidence in the box)
                    let b = &q.boxes[i];
                    assert!(proj.u >= b.x_min - 1e-6 && proj.u <= b.x_max + 1e-6);
                    assert!(proj.v >= b.y_min - 1e-6 && proj.v <= b.y_max + 1e-6);
                }
            }
        }
    }

    #[test]
    fn img_queries_empty_detections_give_none() {
        let (cfg, frame, oc) = scene_fixture();
        let mut store = ParamStore::new();
        let (params, _, feats, bins) = img_fixture(&mut store, &cfg, &frame, &oc, ImageQueryForm::Distribution, 4);
        let dets: Vec<Vec<Detection2D>> = vec![Vec::new(); frame.cameras.len()];
        let mut g = Graph::new();
        let out = gen_img_queries(&mut g, &store, &params, &dets, &feats, &frame.cameras, &bins).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn point_form_predicts_positions_in_depth_range() {
        let (cfg, frame, oc) = scene_fixture();
        let mut store = ParamStore::new();
        let (params, dets, feats, bins) = img_fixture(&mut store, &cfg, &frame, &oc, ImageQueryForm::Point, 4);
        let mut g = Graph::new();
        let Some(ImageQueries::Point(q)) =
            gen_img_queries(&mut g, &store, &params, &dets, &feats, &frame.cameras, &bins).unwrap()
        else {
            panic!("expected point-form queries");
        };
        let pos = g.value(q.positions);
        let dep = g.value(q.depths);
        for i in 0..q.len() {
            let d = dep.at2(i, 0);
            assert!(d > bins.d_min && d < bins.d_max);
            // position projects into the source view at that depth
            let cam = &frame.cameras[q.view_index[i]];
            let p = project_world_to_pixel(cam, [pos.at2(i, 0), pos.at2(i, 1), pos.at2(i, 2)]);
            assert!(p.valid);
            assert!((p.depth - d).abs() < 1e-9);
        }
    }

    #[test]
    fn anchor_from_distribution_cases() {
        // one-hot picks the sampling position
        let s = [0.0, 0.0, 0.0, 4.0, 0.0, 0.0];
        let a = anchor_from_distribution(&s, &[0.0, 1.0]).unwrap();
        assert_eq!(a, [4.0, 0.0, 0.0]);
        // uniform over symmetric points -> the center
        let s = [1.0, 2.0, 3.0, -1.0, -2.0, -3.0];
        let a = anchor_from_distribution(&s, &[0.5, 0.5]).unwrap();
        assert_eq!(a, [0.0, 0.0, 0.0]);
        // weighted average
        let s = [0.0, 0.0, 0.0, 4.0, 0.0, 0.0];
        let a = anchor_from_distribution(&s, &[0.25, 0.75]).unwrap();
        assert!((a[0] - 3.0).abs() < 1e-12);
        // normalization violated
        assert!(anchor_from_distribution(&s, &[0.7, 0.7]).is_err());
        // convex hull bound per coordinate
        let s = [1.0, -2.0, 5.0, 3.0, 4.0, 7.0, 2.0, 1.0, 6.0];
        let u = [0.2, 0.5, 0.3];
        let a = anchor_from_distribution(&s, &u).unwrap();
        for c in 0..3 {
            let xs = [s[c], s[3 + c], s[6 + c]];
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(a[c] >= lo - 1e-12 && a[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn oracle_3d_feeds_pc_generator_end_to_end() {
        let (cfg, frame, oc) = scene_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dets = oracle_detect_3d(&frame, &oc, &mut rng);
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(6);
        let params = PcQueryGenParams::build(&mut store, &mut prng, 16, cfg.class_count, 8, 16, 200).unwrap();
        let mut g = Graph::new();
        if let Some(qs) = gen_pc_queries(&mut g, &store, &params, &dets).unwrap() {
            assert_eq!(g.value(qs.contents).shape(), &[qs.len(), 16]);
            assert!(qs.len() <= 200);
        }
    }
}
