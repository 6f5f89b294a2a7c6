//! Synthetic multi-camera + LiDAR world with oracle detectors.
//!
//! Sequences of constant-velocity 3D boxes are observed by a camera ring and
//! a LiDAR whose per-object point counts fall off roughly with 1/distance^2,
//! so distant objects go missing from the point cloud while staying visible
//! in the images. Oracle experts replace real backbones and detectors but
//! keep their interfaces: per-view 2D boxes with scores, 3D boxes with
//! class-conditioned appearance noise, and smooth per-view feature maps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geometry::{
    mat4_from_flat, mat4_identity, mat4_flatten, project_box3d_to_box2d, wrap_angle,
    Box2D, Box3D, CameraModel, Mat4,
};
use crate::numerics::tensor::Tensor;

/// (w, l, h) size templates per class id.
pub const CLASS_TEMPLATES: [[f64; 3]; 5] = [
    [1.9, 4.5, 1.6], // car
    [0.7, 0.7, 1.7], // pedestrian
    [2.6, 8.0, 3.2], // truck
    [0.6, 1.8, 1.4], // cyclist
    [0.5, 2.5, 1.0], // barrier
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRigSpec {
    pub n_views: usize,
    pub width: f64,
    pub height: f64,
    pub focal: f64,
    pub cam_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    /// Expected points for a 1 m^2 face seen head-on at 1 m.
    pub density: f64,
    pub max_range: f64,
    pub clutter_points: usize,
    pub dropout: f64,
    pub max_points_per_object: usize,
    pub sensor_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub class_count: usize,
    /// Size-template index per class id; defaults to 0..class_count.
    #[serde(default)]
    pub template_ids: Vec<usize>,
    /// Half-extent of the square world, meters.
    pub extent: f64,
    pub speed_max: f64,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    pub rig: CameraRigSpec,
    pub lidar: LidarSpec,
    pub frames_per_sequence: usize,
    pub n_sequences: usize,
    pub dt: f64,
    pub seed: u64,
}

impl SceneConfig {
    /// Short-range desk default (nuScenes-like extent).
    pub fn desk_short_range() -> Self {
        SceneConfig {
            n_objects_min: 5,
            n_objects_max: 10,
            class_count: 3,
            template_ids: vec![],
            extent: 54.4,
            speed_max: 6.0,
            ego_speed: 2.0,
            ego_yaw_rate: 0.0,
            rig: CameraRigSpec { n_views: 4, width: 256.0, height: 160.0, focal: 128.0, cam_height: 1.6 },
            lidar: LidarSpec {
                density: 600.0,
                max_range: 80.0,
                clutter_points: 200,
                dropout: 0.05,
                max_points_per_object: 60,
                sensor_height: 1.8,
            },
            frames_per_sequence: 10,
            n_sequences: 5,
            dt: 0.5,
            seed: 0,
        }
    }

    /// Long-range desk default (AV2-like extent, narrower telephoto views).
    pub fn desk_long_range() -> Self {
        SceneConfig {
            n_objects_min: 8,
            n_objects_max: 14,
            class_count: 3,
            template_ids: vec![],
            extent: 204.8,
            speed_max: 8.0,
            ego_speed: 2.0,
            ego_yaw_rate: 0.0,
            rig: CameraRigSpec { n_views: 6, width: 384.0, height: 224.0, focal: 340.0, cam_height: 1.6 },
            lidar: LidarSpec {
                density: 900.0,
                max_range: 250.0,
                clutter_points: 200,
                dropout: 0.05,
                max_points_per_object: 60,
                sensor_height: 1.8,
            },
            frames_per_sequence: 10,
            n_sequences: 5,
            dt: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.class_count > CLASS_TEMPLATES.len() {
            return Err(Error::config(format!(
                "class_count must be in 1..={}",
                CLASS_TEMPLATES.len()
            )));
        }
        if !self.template_ids.is_empty()
            && (self.template_ids.len() != self.class_count
                || self.template_ids.iter().any(|&t| t >= CLASS_TEMPLATES.len()))
        {
            return Err(Error::config("template_ids must name one valid template per class"));
        }
        if !(self.extent > 0.0) || !(self.dt > 0.0) {
            return Err(Error::config("extent and dt must be positive"));
        }
        if self.n_objects_min > self.n_objects_max {
            return Err(Error::config("n_objects_min > n_objects_max"));
        }
        if self.rig.n_views == 0 || !(self.rig.focal > 0.0) {
            return Err(Error::config("camera rig needs views with positive focal"));
        }
        Ok(())
    }

    /// Size template backing a class id.
    pub fn template_for(&self, class: usize) -> [f64; 3] {
        if self.template_ids.is_empty() {
            CLASS_TEMPLATES[class]
        } else {
            CLASS_TEMPLATES[self.template_ids[class]]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class: usize,
    pub bbox: Box3D,
}

/// One timestamped frame; all geometry is in the frame's own ego frame, with
/// `ego_pose` mapping ego to global coordinates for temporal compensation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub frame_index: usize,
    pub timestamp: f64,
    pub ego_pose: Mat4,
    pub gts: Vec<GtObject>,
    pub lidar: Vec<[f64; 3]>,
    pub cameras: Vec<CameraModel>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic child seed for (seed, lane, index) without shared rng state.
pub fn child_seed(seed: u64, lane: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(lane.wrapping_mul(0xa076_1d64_78bd_642f) ^ index))
}

#[derive(Debug, Clone)]
struct ObjectState {
    class: usize,
    size: [f64; 3],
    pos0: [f64; 2],
    vel: [f64; 2],
    yaw: f64,
}

fn ego_pose_at(cfg: &SceneConfig, t: f64) -> Mat4 {
    let yaw = cfg.ego_yaw_rate * t;
    let (px, py) = if cfg.ego_yaw_rate.abs() < 1e-9 {
        (cfg.ego_speed * t, 0.0)
    } else {
        let r = cfg.ego_speed / cfg.ego_yaw_rate;
        (r * yaw.sin(), r * (1.0 - yaw.cos()))
    };
    let (c, s) = (yaw.cos(), yaw.sin());
    let mut m = mat4_identity();
    m[0][0] = c;
    m[0][1] = -s;
    m[1][0] = s;
    m[1][1] = c;
    m[0][3] = px;
    m[1][3] = py;
    m
}

/// Ring of outward-facing cameras, expressed in the ego frame.
///
/// Optical convention: +z forward, +x right, +y down.
pub fn build_camera_ring(rig: &CameraRigSpec) -> Result<Vec<CameraModel>> {
    let mut cams = Vec::with_capacity(rig.n_views);
    for k in 0..rig.n_views {
        let yaw = std::f64::consts::TAU * k as f64 / rig.n_views as f64;
        let (c, s) = (yaw.cos(), yaw.sin());
        // rows of R map ego axes onto optical axes for a camera heading `yaw`:
        // optical x = -ego-left of heading, optical y = -ego z, optical z = heading
        let mut e = mat4_identity();
        e[0][0] = s;
        e[0][1] = -c;
        e[0][2] = 0.0;
        e[1][0] = 0.0;
        e[1][1] = 0.0;
        e[1][2] = -1.0;
        e[2][0] = c;
        e[2][1] = s;
        e[2][2] = 0.0;
        // translation: -R * cam_position with cam at (0, 0, cam_height)
        e[0][3] = 0.0;
        e[1][3] = rig.cam_height;
        e[2][3] = 0.0;
        cams.push(CameraModel::new(
            rig.focal,
            rig.focal,
            rig.width / 2.0,
            rig.height / 2.0,
            e,
            rig.width,
            rig.height,
        )?);
    }
    Ok(cams)
}

/// Generate one sequence of frames; deterministic in (cfg.seed, seq_index).
pub fn generate_sequence(cfg: &SceneConfig, seq_index: usize) -> Result<Vec<SceneFrame>> {
    cfg.validate()?;
    use rand::SeedableRng;
    let seq_seed = child_seed(cfg.seed, 1, seq_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seq_seed);
    let n_objects = rng.gen_range(cfg.n_objects_min..=cfg.n_objects_max);
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = rng.gen_range(0..cfg.class_count);
        let tmpl = cfg.template_for(class);
        let size = [
            tmpl[0] * rng.gen_range(0.9..1.1),
            tmpl[1] * rng.gen_range(0.9..1.1),
            tmpl[2] * rng.gen_range(0.9..1.1),
        ];
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = rng.gen_range(6.0..cfg.extent * 0.9);
        let speed = if cfg.speed_max > 0.0 { rng.gen_range(0.0..cfg.speed_max) } else { 0.0 };
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let vel = [speed * heading.cos(), speed * heading.sin()];
        let yaw = if speed > 0.1 { heading } else { rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI) };
        objects.push(ObjectState {
            class,
            size,
            pos0: [radius * angle.cos(), radius * angle.sin()],
            vel,
            yaw,
        });
    }
    let cameras = build_camera_ring(&cfg.rig)?;
    let mut frames = Vec::with_capacity(cfg.frames_per_sequence);
    for f in 0..cfg.frames_per_sequence {
        let t = f as f64 * cfg.dt;
        let pose = ego_pose_at(cfg, t);
        let ego_yaw = pose[1][0].atan2(pose[0][0]);
        let (ce, se) = (ego_yaw.cos(), ego_yaw.sin());
        let (ex, ey) = (pose[0][3], pose[1][3]);
        let mut gts = Vec::new();
        for o in &objects {
            let gx = o.pos0[0] + o.vel[0] * t;
            let gy = o.pos0[1] + o.vel[1] * t;
            if gx.abs() > cfg.extent || gy.abs() > cfg.extent {
                continue;
            }
            // global -> ego
            let dx = gx - ex;
            let dy = gy - ey;
            let lx = ce * dx + se * dy;
            let ly = -se * dx + ce * dy;
            let vx = ce * o.vel[0] + se * o.vel[1];
            let vy = -se * o.vel[0] + ce * o.vel[1];
            gts.push(GtObject {
                class: o.class,
                bbox: Box3D::new(
                    [lx, ly, o.size[2] / 2.0],
                    o.size,
                    wrap_angle(o.yaw - ego_yaw),
                    Some([vx, vy]),
                )?,
            });
        }
        let lidar_seed = child_seed(seq_seed, 2, f as u64);
        let mut lrng = ChaCha8Rng::seed_from_u64(lidar_seed);
        let lidar = simulate_lidar(&gts, &cfg.lidar, cfg.extent, &mut lrng);
        frames.push(SceneFrame {
            frame_index: f,
            timestamp: t,
            ego_pose: pose,
            gts,
            lidar,
            cameras: cameras.clone(),
        });
    }
    Ok(frames)
}

/// All sequences for a config.
pub fn generate_dataset(cfg: &SceneConfig) -> Result<Vec<Vec<SceneFrame>>> {
    (0..cfg.n_sequences).map(|s| generate_sequence(cfg, s)).collect()
}

/// Sample LiDAR returns on visible box faces (expected count proportional to
/// face solid angle, so roughly 1/distance^2) plus uniform ground clutter.
pub fn simulate_lidar(gts: &[GtObject], spec: &LidarSpec, extent: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let sensor = [0.0, 0.0, spec.sensor_height];
    let mut points = Vec::new();
    for gt in gts {
        let b = &gt.bbox;
        let (cy, sy) = (b.yaw.cos(), b.yaw.sin());
        let axis_l = [cy, sy, 0.0];
        let axis_w = [-sy, cy, 0.0];
        let axis_z = [0.0, 0.0, 1.0];
        let (w, l, h) = (b.size[0], b.size[1], b.size[2]);
        // (normal axis, half offset, span axes, span halves, area)
        type Face = ([f64; 3], f64, [f64; 3], f64, [f64; 3], f64, f64);
        let faces: [Face; 6] = [
            (axis_l, l / 2.0, axis_w, w / 2.0, axis_z, h / 2.0, w * h),
            ([-axis_l[0], -axis_l[1], 0.0], l / 2.0, axis_w, w / 2.0, axis_z, h / 2.0, w * h),
            (axis_w, w / 2.0, axis_l, l / 2.0, axis_z, h / 2.0, l * h),
            ([-axis_w[0], -axis_w[1], 0.0], w / 2.0, axis_l, l / 2.0, axis_z, h / 2.0, l * h),
            (axis_z, h / 2.0, axis_l, l / 2.0, axis_w, w / 2.0, l * w),
            ([0.0, 0.0, -1.0], h / 2.0, axis_l, l / 2.0, axis_w, w / 2.0, l * w),
        ];
        let mut budget = spec.max_points_per_object;
        for (normal, off, a1, h1, a2, h2, area) in faces {
            if budget == 0 {
                break;
            }
            let center = [
                b.center[0] + normal[0] * off,
                b.center[1] + normal[1] * off,
                b.center[2] + normal[2] * off,
            ];
            let to_sensor = [sensor[0] - center[0], sensor[1] - center[1], sensor[2] - center[2]];
            let dist = (to_sensor[0].powi(2) + to_sensor[1].powi(2) + to_sensor[2].powi(2)).sqrt();
            if dist < 1e-6 || dist > spec.max_range {
                continue;
            }
            let cos = (normal[0] * to_sensor[0] + normal[1] * to_sensor[1] + normal[2] * to_sensor[2]) / dist;
            if cos <= 0.0 {
                continue;
            }
            let expected = spec.density * area * cos / (dist * dist);
            if expected < 1e-9 {
                continue;
            }
            let n = Poisson::new(expected).map(|p| p.sample(rng) as usize).unwrap_or(0);
            for _ in 0..n.min(budget) {
                let u = rng.gen_range(-1.0..1.0);
                let v = rng.gen_range(-1.0..1.0);
                let p = [
                    center[0] + u * a1[0] * h1 + v * a2[0] * h2,
                    center[1] + u * a1[1] * h1 + v * a2[1] * h2,
                    center[2] + u * a1[2] * h1 + v * a2[2] * h2,
                ];
                if rng.gen_range(0.0..1.0) >= spec.dropout {
                    points.push(p);
                }
            }
            budget = budget.saturating_sub(n);
        }
    }
    for _ in 0..spec.clutter_points {
        let p = [rng.gen_range(-extent..extent), rng.gen_range(-extent..extent), 0.0];
        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
        if r <= spec.max_range && rng.gen_range(0.0..1.0) >= spec.dropout {
            points.push(p);
        }
    }
    points
}

/// Recover a per-point class label from geometry: index of the first GT box
/// containing the point, or `class_count` for clutter/background.
pub fn label_points(frame: &SceneFrame, class_count: usize) -> Vec<usize> {
    frame
        .lidar
        .iter()
        .map(|&p| {
            frame
                .gts
                .iter()
                .find(|gt| gt.bbox.contains(p))
                .map_or(class_count, |gt| gt.class)
        })
        .collect()
}

/// Number of points inside each GT box (drives distance-induced misses).
pub fn points_per_gt(frame: &SceneFrame) -> Vec<usize> {
    frame
        .gts
        .iter()
        .map(|gt| frame.lidar.iter().filter(|&&p| gt.bbox.contains(p)).count())
        .collect()
}

/// Smooth per-view feature map, `height/stride x width/stride x (4 + classes)`.
///
/// Channels: silhouette proximity, inside-any-box, two spatial sinusoids, and
/// one proximity channel per class. There is no metric depth channel; depth
/// must be inferred from apparent size and class priors, which degrades with
/// distance exactly like the real monocular cue.
pub fn synthesize_image_features(frame: &SceneFrame, view: usize, stride: usize, class_count: usize) -> Tensor {
    let cam = &frame.cameras[view];
    let wf = (cam.width as usize) / stride;
    let hf = (cam.height as usize) / stride;
    let channels = 4 + class_count;
    let mut boxes: Vec<(usize, Box2D)> = Vec::new();
    for gt in &frame.gts {
        if let Some(b) = project_box3d_to_box2d(cam, &gt.bbox) {
            boxes.push((gt.class, b));
        }
    }
    let mut data = vec![0.0; hf * wf * channels];
    let falloff = 8.0; // pixels
    for r in 0..hf {
        let py = (r as f64 + 0.5) * stride as f64;
        for c in 0..wf {
            let px = (c as f64 + 0.5) * stride as f64;
            let o = (r * wf + c) * channels;
            let mut best = 0.0f64;
            let mut inside = 0.0;
            for (class, b) in &boxes {
                let dx = (b.x_min - px).max(0.0).max(px - b.x_max);
                let dy = (b.y_min - py).max(0.0).max(py - b.y_max);
                let d = (dx * dx + dy * dy).sqrt();
                let gsc = (-d / falloff).exp();
                best = best.max(gsc);
                if d == 0.0 {
                    inside = 1.0;
                }
                let ch = 4 + class;
                if gsc > data[o + ch] {
                    data[o + ch] = gsc;
                }
            }
            data[o] = best;
            data[o + 1] = inside;
            data[o + 2] = (std::f64::consts::TAU * px / cam.width).sin();
            data[o + 3] = (std::f64::consts::TAU * py / cam.height).sin();
        }
    }
    Tensor::from_raw(vec![hf, wf, channels], data)
}

/// One image-side oracle detection.
#[derive(Debug, Clone)]
pub struct Detection2D {
    pub bbox: Box2D,
    pub score: f64,
    pub class: usize,
    /// Index into `frame.gts`; diagnostic only, never consumed by the model.
    pub gt_index: usize,
}

/// One LiDAR-side oracle detection (velocity is left to the fusion heads).
#[derive(Debug, Clone)]
pub struct Detection3D {
    pub bbox: Box3D,
    pub score: f64,
    pub class: usize,
    pub gt_index: usize,
}

/// LiDAR detections plus per-detection appearance noise; the learnable class
/// embedding is added by the query generator so gradients can reach it.
#[derive(Debug, Clone)]
pub struct Detections3D {
    pub dets: Vec<Detection3D>,
    /// One noise row per detection, `feature_dim` wide.
    pub feature_noise: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub jitter_2d_px: f64,
    pub score_noise_2d: f64,
    pub min_box_px: f64,
    pub fn_rate_2d: f64,
    pub center_jitter_3d: f64,
    pub size_jitter_3d: f64,
    pub yaw_jitter_3d: f64,
    pub score_noise_3d: f64,
    pub fn_rate_3d: f64,
    pub min_points_visible: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
}

impl OracleConfig {
    pub fn desk_default(feature_dim: usize) -> Self {
        OracleConfig {
            jitter_2d_px: 1.5,
            score_noise_2d: 0.1,
            min_box_px: 4.0,
            fn_rate_2d: 0.03,
            center_jitter_3d: 0.15,
            size_jitter_3d: 0.05,
            yaw_jitter_3d: 0.05,
            score_noise_3d: 0.1,
            fn_rate_3d: 0.02,
            min_points_visible: 5,
            feature_dim,
            feature_noise: 0.1,
        }
    }

    pub fn noiseless(feature_dim: usize) -> Self {
        OracleConfig {
            jitter_2d_px: 0.0,
            score_noise_2d: 0.0,
            min_box_px: 2.0,
            fn_rate_2d: 0.0,
            center_jitter_3d: 0.0,
            size_jitter_3d: 0.0,
            yaw_jitter_3d: 0.0,
            score_noise_3d: 0.0,
            fn_rate_3d: 0.0,
            min_points_visible: 1,
            feature_dim,
            feature_noise: 0.0,
        }
    }
}

/// Zero-mean gaussian draw; sigma 0 short-circuits to 0.
pub fn gauss_sample(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    rand_distr::Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
}

fn noisy_score(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    (0.9 - gauss_sample(rng, sigma).abs()).clamp(0.05, 1.0)
}

/// Project GT boxes into a view, drop the invisible and tiny ones, jitter the
/// corners, clip to the image and emit a noisy score.
pub fn oracle_detect_2d(
    frame: &SceneFrame,
    view: usize,
    cfg: &OracleConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Detection2D> {
    let cam = &frame.cameras[view];
    let mut out = Vec::new();
    for (gi, gt) in frame.gts.iter().enumerate() {
        let Some(b) = project_box3d_to_box2d(cam, &gt.bbox) else { continue };
        if b.width() < cfg.min_box_px || b.height() < cfg.min_box_px {
            continue;
        }
        if cfg.fn_rate_2d > 0.0 && rng.gen_range(0.0..1.0) < cfg.fn_rate_2d {
            continue;
        }
        let mut x0 = b.x_min + gauss_sample(rng, cfg.jitter_2d_px);
        let mut y0 = b.y_min + gauss_sample(rng, cfg.jitter_2d_px);
        let mut x1 = b.x_max + gauss_sample(rng, cfg.jitter_2d_px);
        let mut y1 = b.y_max + gauss_sample(rng, cfg.jitter_2d_px);
        if x1 < x0 {
            std::mem::swap(&mut x0, &mut x1);
        }
        if y1 < y0 {
            std::mem::swap(&mut y0, &mut y1);
        }
        let x0 = x0.clamp(0.0, cam.width);
        let x1 = x1.clamp(0.0, cam.width);
        let y0 = y0.clamp(0.0, cam.height);
        let y1 = y1.clamp(0.0, cam.height);
        if x1 - x0 < 1e-6 || y1 - y0 < 1e-6 {
            continue;
        }
        out.push(Detection2D {
            bbox: Box2D { x_min: x0, y_min: y0, x_max: x1, y_max: y1 },
            score: noisy_score(rng, cfg.score_noise_2d),
            class: gt.class,
            gt_index: gi,
        });
    }
    out
}

/// LiDAR oracle: GT boxes with too few supporting points are missed, the
/// rest are jittered; appearance noise rows match the surviving detections.
pub fn oracle_detect_3d(frame: &SceneFrame, cfg: &OracleConfig, rng: &mut ChaCha8Rng) -> Detections3D {
    let support = points_per_gt(frame);
    let mut dets = Vec::new();
    let mut noise = Vec::new();
    for (gi, gt) in frame.gts.iter().enumerate() {
        if support[gi] < cfg.min_points_visible {
            continue;
        }
        if cfg.fn_rate_3d > 0.0 && rng.gen_range(0.0..1.0) < cfg.fn_rate_3d {
            continue;
        }
        let b = &gt.bbox;
        let center = [
            b.center[0] + gauss_sample(rng, cfg.center_jitter_3d),
            b.center[1] + gauss_sample(rng, cfg.center_jitter_3d),
            b.center[2] + gauss_sample(rng, cfg.center_jitter_3d * 0.5),
        ];
        let size = [
            b.size[0] * (1.0 + gauss_sample(rng, cfg.size_jitter_3d)).max(0.2),
            b.size[1] * (1.0 + gauss_sample(rng, cfg.size_jitter_3d)).max(0.2),
            b.size[2] * (1.0 + gauss_sample(rng, cfg.size_jitter_3d)).max(0.2),
        ];
        let yaw = wrap_angle(b.yaw + gauss_sample(rng, cfg.yaw_jitter_3d));
        dets.push(Detection3D {
            bbox: Box3D { center, size, yaw, velocity: None },
            score: noisy_score(rng, cfg.score_noise_3d),
            class: gt.class,
            gt_index: gi,
        });
        for _ in 0..cfg.feature_dim {
            noise.push(gauss_sample(rng, cfg.feature_noise));
        }
    }
    let rows = dets.len();
    Detections3D {
        dets,
        feature_noise: Tensor::from_raw(vec![rows, cfg.feature_dim], noise),
    }
}

/// Sparse BEV pillar set: cell-center positions, height-pooled contents, and
/// the row groups that produced them (kept so training can redo the pooling
/// differentiably).
#[derive(Debug, Clone)]
pub struct PillarFeatureSet {
    /// P x 2 BEV cell centers, meters.
    pub positions: Tensor,
    /// P x C mean feature per occupied cell.
    pub contents: Tensor,
    pub groups: Vec<Vec<usize>>,
}

impl PillarFeatureSet {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Bucket points into BEV cells and average their features per cell.
pub fn pillarize(points: &[[f64; 3]], features: &Tensor, cell: f64, extent: f64) -> Result<PillarFeatureSet> {
    if !(cell > 0.0) {
        return Err(Error::config("pillar cell size must be positive"));
    }
    let (n, c) = features.dims2()?;
    if n != points.len() {
        return Err(Error::shape("pillarize: feature rows must match point count"));
    }
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if p[0].abs() > extent || p[1].abs() > extent {
            continue;
        }
        let ix = (p[0] / cell).floor() as i64;
        let iy = (p[1] / cell).floor() as i64;
        cells.entry((ix, iy)).or_default().push(i);
    }
    let p_count = cells.len();
    let mut positions = Vec::with_capacity(p_count * 2);
    let mut contents = vec![0.0; p_count * c];
    let mut groups = Vec::with_capacity(p_count);
    for (pi, ((ix, iy), rows)) in cells.into_iter().enumerate() {
        positions.push((ix as f64 + 0.5) * cell);
        positions.push((iy as f64 + 0.5) * cell);
        let inv = 1.0 / rows.len() as f64;
        for &r in &rows {
            for j in 0..c {
                contents[pi * c + j] += features.data()[r * c + j] * inv;
            }
        }
        groups.push(rows);
    }
    Ok(PillarFeatureSet {
        positions: Tensor::from_raw(vec![p_count, 2], positions),
        contents: Tensor::from_raw(vec![p_count, c], contents),
        groups,
    })
}

// --- scene file serialization -------------------------------------------

pub const SCENE_FORMAT: &str = "fusionq-scene";
pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFileHeader {
    pub format: String,
    pub version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfg_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    k: Vec<f64>,
    extrinsic: Vec<f64>,
    width: f64,
    height: f64,
}

#[derive(Serialize, Deserialize)]
struct GtRecord {
    class: usize,
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    velocity: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LidarRecord {
    Inline { points: Vec<[f64; 3]> },
    Seeded { seed: u64, count: usize },
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame_index: usize,
    timestamp: f64,
    ego_pose: Vec<f64>,
    cameras: Vec<CameraRecord>,
    gts: Vec<GtRecord>,
    lidar: LidarRecord,
}

/// Write a sequence as JSON Lines with a versioned header; points inline.
pub fn serialize_sequence<W: Write>(mut w: W, frames: &[SceneFrame], header: &SceneFileHeader) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for f in frames {
        let rec = FrameRecord {
            frame_index: f.frame_index,
            timestamp: f.timestamp,
            ego_pose: mat4_flatten(&f.ego_pose).to_vec(),
            cameras: f
                .cameras
                .iter()
                .map(|c| CameraRecord {
                    k: mat4_flatten(&c.intrinsic_matrix()).to_vec(),
                    extrinsic: mat4_flatten(&c.extrinsic).to_vec(),
                    width: c.width,
                    height: c.height,
                })
                .collect(),
            gts: f
                .gts
                .iter()
                .map(|g| GtRecord {
                    class: g.class,
                    center: g.bbox.center,
                    size: g.bbox.size,
                    yaw: g.bbox.yaw,
                    velocity: g.bbox.velocity.unwrap_or([0.0, 0.0]),
                })
                .collect(),
            lidar: LidarRecord::Inline { points: f.lidar.clone() },
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_sequence(path: &std::path::Path, frames: &[SceneFrame], header: &SceneFileHeader) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serialize_sequence(std::io::BufWriter::new(file), frames, header)
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse { line, msg: msg.to_string() }
}

/// Load a sequence. Frames whose lidar is stored as `{seed, count}` are
/// regenerated from geometry, which needs the lidar spec and extent.
pub fn load_sequence_from<R: BufRead>(
    r: R,
    lidar_spec: Option<(&LidarSpec, f64)>,
) -> Result<(SceneFileHeader, Vec<SceneFrame>)> {
    use rand::SeedableRng;
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty scene file"))?;
    let header: SceneFileHeader =
        serde_json::from_str(&first?).map_err(|e| parse_err(1, e))?;
    if header.format != SCENE_FORMAT {
        return Err(parse_err(1, format!("unexpected format {:?}", header.format)));
    }
    if header.version != SCENE_VERSION {
        return Err(parse_err(1, format!("unsupported version {}", header.version)));
    }
    let mut frames = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e))?;
        let ego_pose = mat4_from_flat(&rec.ego_pose).map_err(|e| parse_err(i + 1, e))?;
        let mut cameras = Vec::with_capacity(rec.cameras.len());
        for c in &rec.cameras {
            let k = mat4_from_flat(&c.k).map_err(|e| parse_err(i + 1, e))?;
            let e = mat4_from_flat(&c.extrinsic).map_err(|e| parse_err(i + 1, e))?;
            cameras.push(
                CameraModel::new(k[0][0], k[1][1], k[0][2], k[1][2], e, c.width, c.height)
                    .map_err(|e| parse_err(i + 1, e))?,
            );
        }
        let mut gts = Vec::with_capacity(rec.gts.len());
        for gt in &rec.gts {
            gts.push(GtObject {
                class: gt.class,
                bbox: Box3D::new(gt.center, gt.size, gt.yaw, Some(gt.velocity))
                    .map_err(|e| parse_err(i + 1, e))?,
            });
        }
        let lidar = match rec.lidar {
            LidarRecord::Inline { points } => points,
            LidarRecord::Seeded { seed, count } => {
                let Some((spec, extent)) = lidar_spec else {
                    return Err(parse_err(i + 1, "seeded lidar needs a lidar spec to regenerate"));
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts = simulate_lidar(&gts, spec, extent, &mut rng);
                if pts.len() != count {
                    return Err(parse_err(i + 1, format!(
                        "regenerated {} lidar points but file says {count}",
                        pts.len()
                    )));
                }
                pts
            }
        };
        frames.push(SceneFrame {
            frame_index: rec.frame_index,
            timestamp: rec.timestamp,
            ego_pose,
            gts,
            lidar,
            cameras,
        });
    }
    Ok((header, frames))
}

pub fn load_sequence(path: &std::path::Path, lidar_spec: Option<(&LidarSpec, f64)>) -> Result<(SceneFileHeader, Vec<SceneFrame>)> {
    let file = std::fs::File::open(path)?;
    load_sequence_from(std::io::BufReader::new(file), lidar_spec)
}
