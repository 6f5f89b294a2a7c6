//! Whole-model assembly: one struct owning every parameter plus a forward
//! pass that turns a scene frame (through the oracle experts) into decoder
//! outputs, honoring the modality selector.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{
    run_decoder, DecoderConfig, DecoderInputs, DecoderOutput, DecoderParams, HistoryQueue,
    PillarTokens,
};
use crate::error::Result;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::nn::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::query_gen::{
    gen_img_queries, gen_pc_queries, make_depth_bins, DepthBins, ImageQueries, ImageQueryForm,
    ImgQueryGenParams, PcQueryGenParams, PointCloudQuerySet,
};
use crate::scenesim::{
    label_points, oracle_detect_2d, oracle_detect_3d, pillarize, synthesize_image_features,
    Detection2D, OracleConfig, SceneConfig, SceneFrame,
};

/// Which sensors feed a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Camera,
    Lidar,
    Both,
}

impl Modality {
    pub fn uses_camera(self) -> bool {
        matches!(self, Modality::Camera | Modality::Both)
    }

    pub fn uses_lidar(self) -> bool {
        matches!(self, Modality::Lidar | Modality::Both)
    }
}

/// Model hyperparameters; sensor-derived fields (views, classes, feature
/// channels) come from the scene config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub deform_samples: usize,
    pub n_d: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub sinpos_channels: usize,
    pub ffn_hidden: usize,
    pub pc_cap: usize,
    pub img_cap_per_view: usize,
    pub image_query_form: ImageQueryForm,
    pub use_cross_attention: bool,
    pub offset_bound: f64,
    pub upe_input_scale: f64,
    /// BEV cell size used for the model's pillar tokens, meters.
    pub pillar_cell: f64,
    pub feat_stride: usize,
    pub history_k: usize,
    pub history_frames: usize,
    pub num_classes: usize,
    pub n_views: usize,
    pub feat_channels: usize,
    pub extent: f64,
}

impl ModelConfig {
    /// Desk-scale defaults bound to a scene configuration.
    pub fn desk_default(scene: &SceneConfig) -> Self {
        ModelConfig {
            width: 64,
            heads: 4,
            layers: 6,
            deform_samples: 4,
            n_d: 16,
            depth_min: 1.0,
            depth_max: if scene.extent > 100.0 { 220.0 } else { 60.0 },
            sinpos_channels: 16,
            ffn_hidden: 128,
            pc_cap: 200,
            img_cap_per_view: 60,
            image_query_form: ImageQueryForm::Distribution,
            use_cross_attention: true,
            offset_bound: 4.0,
            upe_input_scale: 0.01,
            pillar_cell: 0.8,
            feat_stride: 8,
            history_k: 16,
            history_frames: 4,
            num_classes: scene.class_count,
            n_views: scene.rig.n_views,
            feat_channels: 4 + scene.class_count,
            extent: scene.extent,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            deform_samples: self.deform_samples,
            use_cross_attention: self.use_cross_attention,
            n_views: self.n_views,
            n_d: self.n_d,
            feat_stride: self.feat_stride,
            feat_channels: self.feat_channels,
            ffn_hidden: self.ffn_hidden,
            ln_eps: 1e-5,
            offset_bound: self.offset_bound,
            sinpos_channels: self.sinpos_channels,
            temperature: 10000.0,
            num_classes: self.num_classes,
            upe_input_scale: self.upe_input_scale,
        }
    }
}

/// The full detector: query generators, decoder, and embeddings, all backed
/// by one parameter store.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub pc_gen: PcQueryGenParams,
    pub img_gen: ImgQueryGenParams,
    pub decoder_cfg: DecoderConfig,
    pub decoder: DecoderParams,
    /// (num_classes + 1) x C per-point feature embedding (last row is the
    /// clutter/background class).
    pub point_embed: usize,
    pub bins: DepthBins,
}

impl FusionModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc_gen = PcQueryGenParams::build(
            &mut store,
            &mut rng,
            cfg.width,
            cfg.num_classes,
            cfg.sinpos_channels,
            cfg.width,
            cfg.pc_cap,
        )?;
        let img_gen = ImgQueryGenParams::build(
            &mut store,
            &mut rng,
            cfg.width,
            cfg.feat_channels,
            cfg.feat_stride,
            cfg.n_d,
            cfg.width,
            cfg.img_cap_per_view,
            cfg.image_query_form,
        )?;
        let decoder_cfg = cfg.decoder_config();
        let decoder = DecoderParams::build(&mut store, &mut rng, &decoder_cfg)?;
        let point_embed = store.add(
            "point_embed",
            crate::numerics::nn::glorot_uniform(&mut rng, cfg.num_classes + 1, cfg.width),
        );
        let bins = make_depth_bins(cfg.depth_min, cfg.depth_max, cfg.n_d)?;
        Ok(FusionModel { cfg, store, pc_gen, img_gen, decoder_cfg, decoder, point_embed, bins })
    }

    /// Fresh history queue sized for this model.
    pub fn new_history(&self) -> HistoryQueue {
        HistoryQueue::new(self.cfg.history_k, self.cfg.history_frames)
    }

    /// One forward pass over a frame. Oracle noise is drawn from
    /// `frame_seed`, so identical (frame, seed) pairs produce identical
    /// passes. Returns `None` when the selected modalities produced no
    /// queries at all.
    pub fn forward(
        &self,
        g: &mut Graph,
        frame: &SceneFrame,
        oracle: &OracleConfig,
        modality: Modality,
        history: Option<&HistoryQueue>,
        frame_seed: u64,
    ) -> Result<Option<ForwardPass>> {
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
        // lidar side
        let mut pc: Option<PointCloudQuerySet> = None;
        let mut pillars: Option<PillarTokens> = None;
        let mut n_pillars = 0;
        if modality.uses_lidar() {
            let dets3d = oracle_detect_3d(frame, oracle, &mut rng);
            pc = gen_pc_queries(g, &self.store, &self.pc_gen, &dets3d)?;
            if !frame.lidar.is_empty() {
                let labels = label_points(frame, self.cfg.num_classes);
                let embed = g.param(self.point_embed, self.store.get(self.point_embed));
                let gathered = g.gather_rows(embed, Arc::new(labels))?;
                let noise = {
                    let n = frame.lidar.len();
                    let mut data = Vec::with_capacity(n * self.cfg.width);
                    for _ in 0..n * self.cfg.width {
                        data.push(crate::scenesim::gauss_sample(&mut rng, oracle.feature_noise));
                    }
                    g.constant(Tensor::from_raw(vec![n, self.cfg.width], data))
                };
                let feats = g.add(gathered, noise)?;
                let set = pillarize(&frame.lidar, g.value(feats), self.cfg.pillar_cell, self.cfg.extent)?;
                if !set.is_empty() {
                    n_pillars = set.len();
                    let pooled = g.group_mean_rows(feats, Arc::new(set.groups.clone()))?;
                    pillars = Some(PillarTokens { contents: pooled, positions: set.positions.clone() });
                }
            }
        }
        // camera side
        let mut img: Option<ImageQueries> = None;
        let mut dets2d: Vec<Vec<Detection2D>> = Vec::new();
        let mut features: Vec<Arc<Tensor>> = Vec::new();
        if modality.uses_camera() {
            let mut feats_plain = Vec::with_capacity(frame.cameras.len());
            for v in 0..frame.cameras.len() {
                dets2d.push(oracle_detect_2d(frame, v, oracle, &mut rng));
                let f = synthesize_image_features(frame, v, self.cfg.feat_stride, self.cfg.num_classes);
                feats_plain.push(f);
            }
            img = gen_img_queries(
                g,
                &self.store,
                &self.img_gen,
                &dets2d,
                &feats_plain,
                &frame.cameras,
                &self.bins,
            )?;
            features = feats_plain.into_iter().map(Arc::new).collect();
        }
        let output = run_decoder(
            g,
            &self.store,
            &self.decoder_cfg,
            &self.decoder,
            &DecoderInputs {
                pc: pc.as_ref(),
                img: img.as_ref(),
                image_features: features,
                cameras: &frame.cameras,
                pillars,
                history,
                ego_pose: frame.ego_pose,
                timestamp: frame.timestamp,
            },
        )?;
        let Some(output) = output else { return Ok(None) };
        let point_depths = match &img {
            Some(ImageQueries::Point(q)) => Some(q.depths),
            _ => None,
        };
        Ok(Some(ForwardPass { output, dets2d, point_depths, n_pillars }))
    }
}

/// A finished forward pass plus the side information the losses need.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: DecoderOutput,
    /// Per-view oracle detections that fed the image query generator.
    pub dets2d: Vec<Vec<Detection2D>>,
    /// Point-form predicted depths (M_img x 1), when that head is active.
    pub point_depths: Option<NodeId>,
    pub n_pillars: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::generate_sequence;

    fn tiny_scene() -> (SceneConfig, SceneFrame) {
        let mut cfg = SceneConfig::desk_short_range();
        cfg.n_objects_min = 4;
        cfg.n_objects_max = 4;
        cfg.seed = 77;
        cfg.frames_per_sequence = 1;
        let frame = generate_sequence(&cfg, 0).unwrap().remove(0);
        (cfg, frame)
    }

    fn tiny_model(scene: &SceneConfig) -> FusionModel {
        let mut cfg = ModelConfig::desk_default(scene);
        cfg.width = 16;
        cfg.heads = 2;
        cfg.layers = 2;
        cfg.n_d = 4;
        cfg.sinpos_channels = 4;
        cfg.ffn_hidden = 16;
        cfg.pillar_cell = 2.0;
        FusionModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn forward_runs_in_all_modalities() {
        let (scfg, frame) = tiny_scene();
        let model = tiny_model(&scfg);
        let oracle = OracleConfig::desk_default(model.cfg.width);
        for modality in [Modality::Both, Modality::Camera, Modality::Lidar] {
            let mut g = Graph::new();
            let pass = model.forward(&mut g, &frame, &oracle, modality, None, 9).unwrap();
            if let Some(p) = pass {
                let rec = p.output.final_layer();
                assert!(g.value(rec.heads.cls).is_finite());
                assert!(g.value(rec.heads.reg_norm).is_finite());
                match modality {
                    Modality::Camera => {
                        assert_eq!(p.output.n_pc, 0);
                        assert_eq!(p.n_pillars, 0);
                    }
                    Modality::Lidar => assert_eq!(p.output.n_img, 0),
                    Modality::Both => {}
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic_in_frame_seed() {
        let (scfg, frame) = tiny_scene();
        let model = tiny_model(&scfg);
        let oracle = OracleConfig::desk_default(model.cfg.width);
        let run = || {
            let mut g = Graph::new();
            let p = model.forward(&mut g, &frame, &oracle, Modality::Both, None, 42).unwrap().unwrap();
            let rec = p.output.final_layer();
            (g.value(rec.heads.cls).data().to_vec(), g.value(rec.heads.reg_norm).data().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }
}
