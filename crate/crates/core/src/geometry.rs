//! Pinhole cameras, 2-d/3-d boxes, projections, RoI extraction and IoU.
//!
//! The world frame is the ego frame at the current timestamp. Cameras carry a
//! 4x4 intrinsic matrix (fx, fy, ox, oy) and a 4x4 world-to-camera rigid
//! transform; all projection math lives here.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Row-major 4x4 matrix helpers; enough for rigid transforms.
pub type Mat4 = [[f64; 4]; 4];

pub fn mat4_identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = 0.0;
            for (k, brow) in b.iter().enumerate() {
                acc += a[i][k] * brow[j];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// Apply to a 3-d point with implicit homogeneous 1.
pub fn mat4_apply(m: &Mat4, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    out
}

/// Inverse of a rigid transform (orthonormal rotation block).
pub fn mat4_rigid_inverse(m: &Mat4) -> Mat4 {
    let mut out = mat4_identity();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    for i in 0..3 {
        out[i][3] = -(out[i][0] * m[0][3] + out[i][1] * m[1][3] + out[i][2] * m[2][3]);
    }
    out
}

pub fn mat4_flatten(m: &Mat4) -> [f64; 16] {
    let mut out = [0.0; 16];
    for i in 0..4 {
        out[4 * i..4 * i + 4].copy_from_slice(&m[i]);
    }
    out
}

pub fn mat4_from_flat(v: &[f64]) -> Result<Mat4> {
    if v.len() != 16 {
        return Err(Error::shape("flat 4x4 matrix needs 16 values"));
    }
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i].copy_from_slice(&v[4 * i..4 * i + 4]);
    }
    Ok(m)
}

/// Checks the rotation block of a rigid transform is orthonormal.
pub fn rotation_is_orthonormal(m: &Mat4, tol: f64) -> bool {
    for i in 0..3 {
        for j in 0..3 {
            let mut dot = 0.0;
            for row in m.iter().take(3) {
                dot += row[i] * row[j];
            }
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// A pinhole camera: intrinsics, world-to-camera extrinsic, image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// fx, fy in pixels.
    pub fx: f64,
    pub fy: f64,
    /// Principal point in pixels.
    pub ox: f64,
    pub oy: f64,
    /// World -> camera rigid transform.
    pub extrinsic: Mat4,
    pub width: f64,
    pub height: f64,
}

/// Depth below this is treated as behind the camera.
pub const MIN_VALID_DEPTH: f64 = 1e-6;

impl CameraModel {
    pub fn new(fx: f64, fy: f64, ox: f64, oy: f64, extrinsic: Mat4, width: f64, height: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::config("camera focal lengths must be positive"));
        }
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::config("camera image size must be positive"));
        }
        if !rotation_is_orthonormal(&extrinsic, 1e-9) {
            return Err(Error::config("camera extrinsic rotation is not orthonormal"));
        }
        Ok(CameraModel { fx, fy, ox, oy, extrinsic, width, height })
    }

    /// The paper-style 4x4 intrinsic matrix.
    pub fn intrinsic_matrix(&self) -> Mat4 {
        let mut k = mat4_identity();
        k[0][0] = self.fx;
        k[1][1] = self.fy;
        k[0][2] = self.ox;
        k[1][2] = self.oy;
        k
    }

    /// Camera center expressed in the world frame.
    pub fn center_world(&self) -> [f64; 3] {
        let inv = mat4_rigid_inverse(&self.extrinsic);
        [inv[0][3], inv[1][3], inv[2][3]]
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= self.width && v >= 0.0 && v <= self.height
    }
}

/// Result of projecting a world point into a camera.
#[derive(Debug, Clone, Copy)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z.
    pub depth: f64,
    /// False when the point sits at or behind the image plane.
    pub valid: bool,
}

/// World point -> pixel plus camera-frame depth.
///
/// A depth at or below [`MIN_VALID_DEPTH`] marks the result invalid; the
/// perspective divide is clamped so the coordinates stay finite either way.
pub fn project_world_to_pixel(cam: &CameraModel, p: [f64; 3]) -> PixelProjection {
    let pc = mat4_apply(&cam.extrinsic, p);
    let valid = pc[2] > MIN_VALID_DEPTH;
    let z = if pc[2].abs() < MIN_VALID_DEPTH {
        MIN_VALID_DEPTH.copysign(if pc[2] == 0.0 { 1.0 } else { pc[2] })
    } else {
        pc[2]
    };
    PixelProjection {
        u: cam.fx * pc[0] / z + cam.ox,
        v: cam.fy * pc[1] / z + cam.oy,
        depth: pc[2],
        valid,
    }
}

/// Pixel + camera-frame depth -> world point; exact right-inverse of
/// [`project_world_to_pixel`] at that depth.
pub fn unproject_pixel_at_depth(cam: &CameraModel, pixel: (f64, f64), depth: f64) -> Result<[f64; 3]> {
    if !(depth > 0.0) {
        return Err(Error::domain(format!("unproject depth must be positive, got {depth}")));
    }
    let pc = [
        (pixel.0 - cam.ox) / cam.fx * depth,
        (pixel.1 - cam.oy) / cam.fy * depth,
        depth,
    ];
    let inv = mat4_rigid_inverse(&cam.extrinsic);
    Ok(mat4_apply(&inv, pc))
}

/// Axis-aligned 2-d box in pixels, (x_min, y_min, x_max, y_max).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::domain(format!(
                "degenerate 2d box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Box2D { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) * 0.5, (self.y_min + self.y_max) * 0.5)
    }
}

/// Oriented 3-d box: center, size (w, l, h), yaw about +z, optional velocity.
///
/// `l` runs along the heading direction, `w` across it, `h` up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: Option<[f64; 2]>,
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, velocity: Option<[f64; 2]>) -> Result<Self> {
        if size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::domain(format!("3d box size must be positive, got {size:?}")));
        }
        Ok(Box3D { center, size, yaw: wrap_angle(yaw), velocity })
    }

    /// The seven regression scalars (x, y, z, w, l, h, rot).
    pub fn params7(&self) -> [f64; 7] {
        [
            self.center[0], self.center[1], self.center[2],
            self.size[0], self.size[1], self.size[2],
            self.yaw,
        ]
    }

    /// The 8 corners in world coordinates.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (w, l, h) = (self.size[0], self.size[1], self.size[2]);
        let (cy, sy) = (self.yaw.cos(), self.yaw.sin());
        let mut out = [[0.0; 3]; 8];
        let mut i = 0;
        for &dz in &[-h / 2.0, h / 2.0] {
            for &dl in &[-l / 2.0, l / 2.0] {
                for &dw in &[-w / 2.0, w / 2.0] {
                    out[i] = [
                        self.center[0] + dl * cy - dw * sy,
                        self.center[1] + dl * sy + dw * cy,
                        self.center[2] + dz,
                    ];
                    i += 1;
                }
            }
        }
        out
    }

    /// Point containment in the oriented box.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (cy, sy) = (self.yaw.cos(), self.yaw.sin());
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        let along = dx * cy + dy * sy;
        let across = -dx * sy + dy * cy;
        along.abs() <= self.size[1] / 2.0 && across.abs() <= self.size[0] / 2.0 && dz.abs() <= self.size[2] / 2.0
    }
}

/// Equivalent intrinsic matrix mapping camera coordinates into an
/// `roi_size` grid cut out by `box2d`, compensating the geometry lost by
/// RoI cropping.
pub fn equivalent_intrinsics(cam: &CameraModel, box2d: &Box2D, roi_size: (usize, usize)) -> Result<Mat4> {
    if roi_size.0 == 0 || roi_size.1 == 0 {
        return Err(Error::domain("roi_size must be positive"));
    }
    if !(box2d.x_min < box2d.x_max && box2d.y_min < box2d.y_max) {
        return Err(Error::domain("degenerate box for equivalent intrinsics"));
    }
    let rx = roi_size.0 as f64 / box2d.width();
    let ry = roi_size.1 as f64 / box2d.height();
    let mut k = mat4_identity();
    k[0][0] = cam.fx * rx;
    k[1][1] = cam.fy * ry;
    k[0][2] = (cam.ox - box2d.x_min) * rx;
    k[1][2] = (cam.oy - box2d.y_min) * ry;
    Ok(k)
}

/// Bilinear sample of an HxWxC map with pixel centers at half-integers and
/// out-of-bounds coordinates clamped to the border.
pub fn bilinear_sample_into(out: &mut [f64], map: &Tensor, x: f64, y: f64) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    debug_assert_eq!(out.len(), c);
    let xc = x.clamp(0.5, w as f64 - 0.5);
    let yc = y.clamp(0.5, h as f64 - 0.5);
    let x0 = (xc - 0.5).floor();
    let y0 = (yc - 0.5).floor();
    let tx = xc - 0.5 - x0;
    let ty = yc - 0.5 - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let d = map.data();
    let base = |r: usize, col: usize| &d[(r * w + col) * c..(r * w + col) * c + c];
    let (f00, f01, f10, f11) = (base(y0, x0), base(y0, x1), base(y1, x0), base(y1, x1));
    for i in 0..c {
        out[i] = f00[i] * (1.0 - tx) * (1.0 - ty)
            + f01[i] * tx * (1.0 - ty)
            + f10[i] * (1.0 - tx) * ty
            + f11[i] * tx * ty;
    }
}

/// RoI-Align with one bilinear sample per output cell at its center.
///
/// `box2d` is in the feature map's own pixel coordinates; the output grid is
/// `roi_size.1` rows by `roi_size.0` cols, channels last.
pub fn roi_align(map: &Tensor, box2d: &Box2D, roi_size: (usize, usize)) -> Result<Tensor> {
    if map.shape().len() != 3 {
        return Err(Error::shape("roi_align expects an HxWxC map"));
    }
    let (h, w) = (map.shape()[0] as f64, map.shape()[1] as f64);
    if box2d.x_max <= 0.0 || box2d.y_max <= 0.0 || box2d.x_min >= w || box2d.y_min >= h {
        return Err(Error::domain("roi box does not intersect the feature map"));
    }
    let (wr, hr) = roi_size;
    let c = map.shape()[2];
    let mut data = vec![0.0; wr * hr * c];
    let cell_w = box2d.width() / wr as f64;
    let cell_h = box2d.height() / hr as f64;
    for r in 0..hr {
        let y = box2d.y_min + (r as f64 + 0.5) * cell_h;
        for col in 0..wr {
            let x = box2d.x_min + (col as f64 + 0.5) * cell_w;
            let o = (r * wr + col) * c;
            bilinear_sample_into(&mut data[o..o + c], map, x, y);
        }
    }
    Ok(Tensor::from_raw(vec![hr, wr, c], data))
}

/// Intersection-over-union of two 2-d boxes.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Project a 3-d box's corners and return the clipped axis-aligned hull.
///
/// Corners with depth at or below [`MIN_VALID_DEPTH`] are dropped; `None`
/// when nothing is in front of the camera or the clipped hull is empty.
pub fn project_box3d_to_box2d(cam: &CameraModel, box3d: &Box3D) -> Option<Box2D> {
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut any = false;
    for corner in box3d.corners() {
        let p = project_world_to_pixel(cam, corner);
        if !p.valid {
            continue;
        }
        any = true;
        x_min = x_min.min(p.u);
        y_min = y_min.min(p.v);
        x_max = x_max.max(p.u);
        y_max = y_max.max(p.v);
    }
    if !any {
        return None;
    }
    let x_min = x_min.max(0.0);
    let y_min = y_min.max(0.0);
    let x_max = x_max.min(cam.width);
    let y_max = y_max.min(cam.height);
    if x_min >= x_max || y_min >= y_max {
        return None;
    }
    Some(Box2D { x_min, y_min, x_max, y_max })
}
