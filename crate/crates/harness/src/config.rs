//! Experiment configuration: a TOML file mirroring the config structs, plus
//! the content hash embedded in every artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fusionq_core::model::ModelConfig;
use fusionq_core::query_gen::ImageQueryForm;
use fusionq_core::scenesim::{OracleConfig, SceneConfig};
use fusionq_core::training::LossWeights;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub scene: SceneConfig,
    #[serde(default = "default_oracle")]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub sparsity: SparsitySection,
}

fn default_oracle() -> OracleConfig {
    OracleConfig::desk_default(64)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub deform_samples: usize,
    pub n_d: usize,
    pub depth_min: f64,
    /// 0 picks the scene-scale default (60 m short range, 220 m long range).
    pub depth_max: f64,
    pub sinpos_channels: usize,
    pub ffn_hidden: usize,
    pub pc_cap: usize,
    pub img_cap_per_view: usize,
    /// "distribution" or "point".
    pub image_query_form: String,
    pub use_cross_attention: bool,
    pub offset_bound: f64,
    pub pillar_cell: f64,
    pub history_k: usize,
    pub history_frames: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            width: 64,
            heads: 4,
            layers: 6,
            deform_samples: 4,
            n_d: 16,
            depth_min: 1.0,
            depth_max: 0.0,
            sinpos_channels: 16,
            ffn_hidden: 128,
            pc_cap: 200,
            img_cap_per_view: 60,
            image_query_form: "distribution".into(),
            use_cross_attention: true,
            offset_bound: 4.0,
            pillar_cell: 0.8,
            history_k: 16,
            history_frames: 4,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, scene: &SceneConfig) -> anyhow::Result<ModelConfig> {
        let mut cfg = ModelConfig::desk_default(scene);
        cfg.width = self.width;
        cfg.heads = self.heads;
        cfg.layers = self.layers;
        cfg.deform_samples = self.deform_samples;
        cfg.n_d = self.n_d;
        cfg.depth_min = self.depth_min;
        if self.depth_max > 0.0 {
            cfg.depth_max = self.depth_max;
        }
        cfg.sinpos_channels = self.sinpos_channels;
        cfg.ffn_hidden = self.ffn_hidden;
        cfg.pc_cap = self.pc_cap;
        cfg.img_cap_per_view = self.img_cap_per_view;
        cfg.image_query_form = match self.image_query_form.as_str() {
            "distribution" => ImageQueryForm::Distribution,
            "point" => ImageQueryForm::Point,
            other => anyhow::bail!("unknown image_query_form {other:?} (use distribution|point)"),
        };
        cfg.use_cross_attention = self.use_cross_attention;
        cfg.offset_bound = self.offset_bound;
        cfg.pillar_cell = self.pillar_cell;
        cfg.history_k = self.history_k;
        cfg.history_frames = self.history_frames;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainingSection {
    pub steps: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub cosine: bool,
    pub weight_decay: f64,
    pub lambda_cls: f64,
    pub lambda_out: f64,
    pub lambda_aux: f64,
    pub tau_iou: f64,
    pub modality_probs: [f64; 3],
    pub use_history: bool,
    /// Log cadence for loss.csv rows (every step when 1).
    pub log_every: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            steps: 1500,
            lr: 2e-3,
            lr_min: 1e-4,
            cosine: true,
            weight_decay: 0.01,
            lambda_cls: 2.0,
            lambda_out: 1.0,
            lambda_aux: 0.5,
            tau_iou: 0.3,
            modality_probs: [0.2, 0.1, 0.7],
            use_history: true,
            log_every: 1,
        }
    }
}

impl TrainingSection {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_out: self.lambda_out,
            lambda_aux: self.lambda_aux,
            tau_iou: self.tau_iou,
            ..LossWeights::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalSection {
    /// Center-distance thresholds in meters, ascending.
    pub thresholds: Vec<f64>,
    /// 0 evaluates on the training scenes; otherwise this many held-out
    /// sequences are generated from a separate seed lane.
    pub eval_sequences: usize,
    pub use_history: bool,
    /// Sensors available at evaluation: "both", "camera", or "lidar".
    pub modality: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            eval_sequences: 0,
            use_history: true,
            modality: "both".into(),
        }
    }
}

impl EvalSection {
    pub fn modality(&self) -> anyhow::Result<fusionq_core::model::Modality> {
        use fusionq_core::model::Modality;
        Ok(match self.modality.as_str() {
            "both" => Modality::Both,
            "camera" => Modality::Camera,
            "lidar" => Modality::Lidar,
            other => anyhow::bail!("unknown eval modality {other:?} (use both|camera|lidar)"),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblateSection {
    pub query_forms: Vec<String>,
    pub cross_attention: Vec<bool>,
    pub history_frames: Vec<usize>,
    pub modality_probs: Vec<[f64; 3]>,
    /// Steps per ablation cell (keeps the grid affordable).
    pub steps: u64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            query_forms: vec!["distribution".into(), "point".into()],
            cross_attention: vec![true, false],
            history_frames: vec![0, 4],
            modality_probs: vec![[0.0, 0.0, 1.0]],
            steps: 400,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SparsitySection {
    /// Our sparse pillar cell size, meters.
    pub pillar_cell: f64,
    /// The dense baseline's BEV cell size and half-extent, meters.
    pub dense_cell: f64,
    pub dense_extent: f64,
}

impl Default for SparsitySection {
    fn default() -> Self {
        SparsitySection { pillar_cell: 0.2, dense_cell: 0.6, dense_extent: 204.0 }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.scene.validate().map_err(|e| anyhow::anyhow!("scene config: {e}"))?;
        if !cfg.eval.thresholds.windows(2).all(|w| w[0] < w[1])
            || cfg.eval.thresholds.iter().any(|t| *t <= 0.0)
        {
            anyhow::bail!("eval thresholds must be positive and ascending");
        }
        Ok(cfg)
    }

    /// Canonical content hash embedded in artifacts.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short-range desk default.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            seed: 0,
            scene: SceneConfig::desk_short_range(),
            oracle: default_oracle(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            sparsity: SparsitySection::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::desk_default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let text = r#"
            seed = 7
            [scene]
            n_objects_min = 3
            n_objects_max = 5
            class_count = 3
            extent = 54.4
            speed_max = 5.0
            ego_speed = 0.0
            ego_yaw_rate = 0.0
            frames_per_sequence = 4
            n_sequences = 2
            dt = 0.5
            seed = 1
            [scene.rig]
            n_views = 4
            width = 256.0
            height = 160.0
            focal = 128.0
            cam_height = 1.6
            [scene.lidar]
            density = 600.0
            max_range = 80.0
            clutter_points = 100
            dropout = 0.05
            max_points_per_object = 60
            sensor_height = 1.8
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.width, 64);
        assert_eq!(cfg.training.modality_probs, [0.2, 0.1, 0.7]);
        let mc = cfg.model.to_model_config(&cfg.scene).unwrap();
        assert_eq!(mc.depth_max, 60.0);
        assert_eq!(mc.num_classes, 3);
    }

    #[test]
    fn bad_query_form_is_rejected() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.model.image_query_form = "fuzzy".into();
        assert!(cfg.model.to_model_config(&cfg.scene).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::desk_default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
