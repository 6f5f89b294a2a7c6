//! Reverse-mode autodiff over a tape of tensor ops.
//!
//! Forward building is eager: every op computes its value when pushed, so a
//! finished graph is also the forward pass. `backward` walks the tape in
//! reverse and accumulates vector-Jacobian products into the parameter slots
//! registered through [`Graph::param`]. Ops that would be awkward to compose
//! from primitives (projection, bilinear sampling, per-row layer norm) are
//! fused with hand-derived Jacobians; every Jacobian is checked against
//! central finite differences in the test suite.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{mat4_rigid_inverse, CameraModel, MIN_VALID_DEPTH};
use crate::numerics::tensor::{matmul_into, matmul_transb_into, softmax_slice, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// M x N plus a length-N row vector, broadcast over rows.
    AddRow(NodeId, NodeId),
    /// M x N times an M x 1 column, broadcast over columns.
    MulCol(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    /// ln(max(x, floor)).
    LogFloor(NodeId, f64),
    PowConst(NodeId, f64),
    Abs(NodeId),
    RowSoftmax(NodeId),
    /// Row softmax over entries whose mask bit is set; masked-out entries are
    /// zero, and an all-masked row is all zeros.
    MaskedRowSoftmax(NodeId, Arc<Vec<bool>>),
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    SumAll(NodeId),
    /// R x C -> 1 x C column sums.
    SumRowsAll(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    GatherRows { x: NodeId, idx: Arc<Vec<usize>> },
    /// Mean of each row group; used for pillar pooling and RoI pooling.
    GroupMeanRows { x: NodeId, groups: Arc<Vec<Vec<usize>>> },
    Reshape(NodeId),
    /// World points M x 3 -> (u, v, camera depth) rows via a fixed camera.
    ProjectToPixel { x: NodeId, cam: Arc<CameraModel> },
    /// Pixels M x 2 -> world points M x 3 at fixed per-row depths.
    UnprojectAtDepth { x: NodeId, cam: Arc<CameraModel>, depths: Arc<Vec<f64>> },
    /// Grid positions M x 2 -> M x C samples of a constant H x W x C map,
    /// bilinear with border clamp (pixel centers at half-integers).
    BilinearSample { pos: NodeId, map: Arc<Tensor> },
    /// u: M x n, s: M x 3n -> M x 3 probability-weighted positions.
    WeightedPosMean { u: NodeId, s: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Eager autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(NodeId, usize)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const, t, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Register a leaf tied to a parameter-store slot; gradients land there.
    pub fn param(&mut self, slot: usize, value: &Tensor) -> NodeId {
        let id = self.push(Op::Param, value.clone(), true);
        self.params.push((id, slot));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v, self.ng(a) || self.ng(b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v, self.ng(a) || self.ng(b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v, self.ng(a) || self.ng(b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_assign(c);
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), v, ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(row).numel() != n {
            return Err(Error::shape("add_row: row length mismatch"));
        }
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += rv[j];
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Op::AddRow(a, row), Tensor::from_raw(vec![m, n], out), ng))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let (mc, nc) = self.value(col).dims2()?;
        if mc != m || nc != 1 {
            return Err(Error::shape("mul_col: column shape mismatch"));
        }
        let cv = self.value(col).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= cv[i];
            }
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(Op::MulCol(a, col), Tensor::from_raw(vec![m, n], out), ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: {m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::from_raw(vec![m, n], out), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Op::Transpose(a), Tensor::from_raw(vec![n, m], out), ng))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x.tanh());
        let ng = self.ng(a);
        self.push(Op::Tanh(a), v, ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x.exp());
        let ng = self.ng(a);
        self.push(Op::Exp(a), v, ng)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x.sin());
        let ng = self.ng(a);
        self.push(Op::Sin(a), v, ng)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x.cos());
        let ng = self.ng(a);
        self.push(Op::Cos(a), v, ng)
    }

    /// Sinusoidal positional encoding of each row of `x` (M x d ->
    /// M x d*channels), matching [`crate::numerics::tensor::sinpos_encode`].
    /// Constant inputs short-circuit to a constant node; differentiable
    /// inputs are built from sin/cos primitives.
    pub fn sinpos(&mut self, x: NodeId, channels_per_scalar: usize, temperature: f64) -> Result<NodeId> {
        let (m, d) = self.value(x).dims2()?;
        if !self.ng(x) {
            let mut data = Vec::with_capacity(m * d * channels_per_scalar);
            for i in 0..m {
                let row = self.value(x).row(i);
                data.extend(crate::numerics::tensor::sinpos_encode(row, channels_per_scalar, temperature)?);
            }
            return Ok(self.constant(Tensor::from_raw(vec![m, d * channels_per_scalar], data)));
        }
        if channels_per_scalar == 0 || !channels_per_scalar.is_multiple_of(2) {
            return Err(Error::config("sinpos channels must be a positive even count"));
        }
        let k = channels_per_scalar / 2;
        let mut cols = Vec::with_capacity(d * channels_per_scalar);
        for j in 0..d {
            let xj = self.slice_cols(x, j, 1)?;
            for i in 0..k {
                let denom = temperature.powf(i as f64 / k as f64);
                let scaled = self.scale(xj, 1.0 / denom);
                cols.push(self.sin(scaled));
                cols.push(self.cos(scaled));
            }
        }
        self.concat_cols(&cols)
    }

    pub fn log_floor(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = map(self.value(a), |x| x.max(floor).ln());
        let ng = self.ng(a);
        self.push(Op::LogFloor(a, floor), v, ng)
    }

    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = map(self.value(a), |x| x.powf(p));
        let ng = self.ng(a);
        self.push(Op::PowConst(a, p), v, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x.abs());
        let ng = self.ng(a);
        self.push(Op::Abs(a), v, ng)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if n == 0 {
            return Err(Error::domain("row_softmax over zero columns"));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = softmax_slice(&d[i * n..(i + 1) * n])?;
            out[i * n..(i + 1) * n].copy_from_slice(&row);
        }
        let ng = self.ng(a);
        Ok(self.push(Op::RowSoftmax(a), Tensor::from_raw(vec![m, n], out), ng))
    }

    /// Softmax per row restricted to masked-in entries; an all-masked-out row
    /// yields zeros (used when no deformable sample is valid).
    pub fn masked_row_softmax(&mut self, a: NodeId, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if mask.len() != m * n {
            return Err(Error::shape("masked_row_softmax: mask length mismatch"));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if mask[i * n + j] {
                    mx = mx.max(d[i * n + j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for j in 0..n {
                if mask[i * n + j] {
                    let e = (d[i * n + j] - mx).exp();
                    out[i * n + j] = e;
                    s += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= s;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Op::MaskedRowSoftmax(a, mask), Tensor::from_raw(vec![m, n], out), ng))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm_rows: affine length mismatch"));
        }
        let d = self.value(x).data();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Op::LayerNormRows { x, gain, bias, eps }, Tensor::from_raw(vec![m, n], out), ng))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), ng)
    }

    pub fn sum_rows_all(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += d[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Op::SumRowsAll(a), Tensor::from_raw(vec![1, n], out), ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of nothing"));
        }
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            let (m, np) = self.value(p).dims2()?;
            if np != n {
                return Err(Error::shape("concat_rows: column mismatch"));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
            ng |= self.ng(p);
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_raw(vec![rows, n], data), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of nothing"));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut ng = false;
        for &p in parts {
            let (mp, np) = self.value(p).dims2()?;
            if mp != m {
                return Err(Error::shape("concat_cols: row mismatch"));
            }
            widths.push(np);
            total += np;
            ng |= self.ng(p);
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_raw(vec![m, total], data), ng))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > m {
            return Err(Error::shape("slice_rows out of range"));
        }
        let d = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Op::SliceRows { x, start, len }, Tensor::from_raw(vec![len, n], d), ng))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::shape("slice_cols out of range"));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Op::SliceCols { x, start, len }, Tensor::from_raw(vec![m, len], out), ng))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if idx.iter().any(|&i| i >= m) {
            return Err(Error::shape("gather_rows index out of range"));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        let rows = idx.len();
        let ng = self.ng(x);
        Ok(self.push(Op::GatherRows { x, idx }, Tensor::from_raw(vec![rows, n], out), ng))
    }

    pub fn group_mean_rows(&mut self, x: NodeId, groups: Arc<Vec<Vec<usize>>>) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let d = self.value(x).data();
        let mut out = vec![0.0; groups.len() * n];
        for (p, grp) in groups.iter().enumerate() {
            if grp.is_empty() {
                return Err(Error::shape("group_mean_rows: empty group"));
            }
            for &r in grp {
                if r >= m {
                    return Err(Error::shape("group_mean_rows index out of range"));
                }
                for j in 0..n {
                    out[p * n + j] += d[r * n + j];
                }
            }
            let inv = 1.0 / grp.len() as f64;
            for j in 0..n {
                out[p * n + j] *= inv;
            }
        }
        let rows = groups.len();
        let ng = self.ng(x);
        Ok(self.push(Op::GroupMeanRows { x, groups }, Tensor::from_raw(vec![rows, n], out), ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(Op::Reshape(x), v, ng))
    }

    /// Differentiable pinhole projection; rows are (u, v, camera depth). The
    /// perspective divide clamps |z| at [`MIN_VALID_DEPTH`] so behind-camera
    /// points stay finite (consumers mask on the depth channel).
    pub fn project_to_pixel(&mut self, x: NodeId, cam: Arc<CameraModel>) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if n != 3 {
            return Err(Error::shape("project_to_pixel expects M x 3 points"));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; m * 3];
        for i in 0..m {
            let p = [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]];
            let pc = crate::geometry::mat4_apply(&cam.extrinsic, p);
            let z = safe_depth(pc[2]);
            out[i * 3] = cam.fx * pc[0] / z + cam.ox;
            out[i * 3 + 1] = cam.fy * pc[1] / z + cam.oy;
            out[i * 3 + 2] = pc[2];
        }
        let ng = self.ng(x);
        Ok(self.push(Op::ProjectToPixel { x, cam }, Tensor::from_raw(vec![m, 3], out), ng))
    }

    /// Differentiable camera-to-world unprojection of pixel rows at fixed
    /// per-row depths.
    pub fn unproject_at_depth(&mut self, x: NodeId, cam: Arc<CameraModel>, depths: Arc<Vec<f64>>) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if n != 2 || depths.len() != m {
            return Err(Error::shape("unproject_at_depth expects M x 2 pixels and M depths"));
        }
        if depths.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::domain("unproject depth must be positive"));
        }
        let d = self.value(x).data();
        let inv = mat4_rigid_inverse(&cam.extrinsic);
        let mut out = vec![0.0; m * 3];
        for i in 0..m {
            let depth = depths[i];
            let pc = [
                (d[i * 2] - cam.ox) / cam.fx * depth,
                (d[i * 2 + 1] - cam.oy) / cam.fy * depth,
                depth,
            ];
            let w = crate::geometry::mat4_apply(&inv, pc);
            out[i * 3..i * 3 + 3].copy_from_slice(&w);
        }
        let ng = self.ng(x);
        Ok(self.push(Op::UnprojectAtDepth { x, cam, depths }, Tensor::from_raw(vec![m, 3], out), ng))
    }

    /// Bilinear sampling of a constant feature map at M x 2 grid positions.
    pub fn bilinear_sample(&mut self, pos: NodeId, map: Arc<Tensor>) -> Result<NodeId> {
        let (m, n) = self.value(pos).dims2()?;
        if n != 2 || map.shape().len() != 3 {
            return Err(Error::shape("bilinear_sample expects M x 2 positions and an HxWxC map"));
        }
        let c = map.shape()[2];
        let d = self.value(pos).data();
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            crate::geometry::bilinear_sample_into(&mut out[i * c..(i + 1) * c], &map, d[i * 2], d[i * 2 + 1]);
        }
        let ng = self.ng(pos);
        Ok(self.push(Op::BilinearSample { pos, map }, Tensor::from_raw(vec![m, c], out), ng))
    }

    /// Probability-weighted mean of per-row sampling positions:
    /// u is M x n, s is M x 3n laid out (x0, y0, z0, x1, ...).
    pub fn weighted_pos_mean(&mut self, u: NodeId, s: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(u).dims2()?;
        let (ms, ns) = self.value(s).dims2()?;
        if ms != m || ns != 3 * n {
            return Err(Error::shape("weighted_pos_mean: u M x n needs s M x 3n"));
        }
        let ud = self.value(u).data();
        let sd = self.value(s).data();
        let mut out = vec![0.0; m * 3];
        for i in 0..m {
            for j in 0..n {
                let w = ud[i * n + j];
                for c in 0..3 {
                    out[i * 3 + c] += w * sd[i * 3 * n + 3 * j + c];
                }
            }
        }
        let ng = self.ng(u) || self.ng(s);
        Ok(self.push(Op::WeightedPosMean { u, s }, Tensor::from_raw(vec![m, 3], out), ng))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss; returns one gradient per parameter
    /// slot (None where no gradient flowed).
    pub fn backward(&self, loss: NodeId, n_slots: usize) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.vjp(id, &g, &mut grads);
            if id == loss && loss != id {
                unreachable!();
            }
            if matches!(self.nodes[id].op, Op::Param) {
                grads[id] = Some(g);
            }
        }
        let mut out: Vec<Option<Tensor>> = (0..n_slots).map(|_| None).collect();
        for &(node, slot) in &self.params {
            if let Some(g) = &grads[node] {
                match &mut out[slot] {
                    Some(acc) => acc.add_assign(g),
                    None => out[slot] = Some(g.clone()),
                }
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn vjp(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Const | Op::Param => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                let mut gb = g.clone();
                gb.scale_assign(-1.0);
                self.accum(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let mut ga = g.clone();
                ga.scale_assign(*c);
                self.accum(grads, *a, ga);
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                if self.ng(*row) {
                    let (m, n) = self.value(*a).dims2().unwrap();
                    let mut gr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += g.data()[i * n + j];
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accum(grads, *row, Tensor::from_raw(shape, gr));
                }
            }
            Op::MulCol(a, col) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let cv = self.value(*col).data();
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..m {
                        for j in 0..n {
                            ga.data_mut()[i * n + j] *= cv[i];
                        }
                    }
                    self.accum(grads, *a, ga);
                }
                if self.ng(*col) {
                    let av = self.value(*a).data();
                    let mut gc = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..n {
                            gc[i] += g.data()[i * n + j] * av[i * n + j];
                        }
                    }
                    self.accum(grads, *col, Tensor::from_raw(vec![m, 1], gc));
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_transb_into(&mut ga, g.data(), self.value(*b).data(), m, n, k);
                    self.accum(grads, *a, Tensor::from_raw(vec![m, k], ga));
                }
                if self.ng(*b) {
                    // gB = A^T G
                    let a_d = self.value(*a).data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a_d[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g.data()[i * n + j];
                            }
                        }
                    }
                    self.accum(grads, *b, Tensor::from_raw(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = g.dims2().unwrap();
                let mut ga = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] = g.data()[i * m + j];
                    }
                }
                self.accum(grads, *a, Tensor::from_raw(vec![m, n], ga));
            }
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accum(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(g, &self.nodes[id].value, |gv, y| gv * y * (1.0 - y));
                self.accum(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, &self.nodes[id].value, |gv, y| gv * (1.0 - y * y));
                self.accum(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_map(g, &self.nodes[id].value, |gv, y| gv * y);
                self.accum(grads, *a, ga);
            }
            Op::Sin(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| gv * x.cos());
                self.accum(grads, *a, ga);
            }
            Op::Cos(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| -gv * x.sin());
                self.accum(grads, *a, ga);
            }
            Op::LogFloor(a, floor) => {
                let f = *floor;
                let ga = zip_map(g, self.value(*a), |gv, x| if x > f { gv / x } else { 0.0 });
                self.accum(grads, *a, ga);
            }
            Op::PowConst(a, p) => {
                let pw = *p;
                let ga = zip_map(g, self.value(*a), |gv, x| gv * pw * x.powf(pw - 1.0));
                self.accum(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| gv * x.signum() * if x == 0.0 { 0.0 } else { 1.0 });
                self.accum(grads, *a, ga);
            }
            Op::RowSoftmax(a) => {
                let (m, n) = self.nodes[id].value.dims2().unwrap();
                let y = self.nodes[id].value.data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g.data()[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        ga[i * n + j] = y[i * n + j] * (g.data()[i * n + j] - dot);
                    }
                }
                self.accum(grads, *a, Tensor::from_raw(vec![m, n], ga));
            }
            Op::MaskedRowSoftmax(a, mask) => {
                let (m, n) = self.nodes[id].value.dims2().unwrap();
                let y = self.nodes[id].value.data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        if mask[i * n + j] {
                            dot += g.data()[i * n + j] * y[i * n + j];
                        }
                    }
                    for j in 0..n {
                        if mask[i * n + j] {
                            ga[i * n + j] = y[i * n + j] * (g.data()[i * n + j] - dot);
                        }
                    }
                }
                self.accum(grads, *a, Tensor::from_raw(vec![m, n], ga));
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let d = self.value(*x).data();
                let gv = self.value(*gain).data();
                let nn = n as f64;
                let mut gx = vec![0.0; m * n];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for i in 0..m {
                    let row = &d[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / nn;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nn;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat and dxhat = g * gain
                    let mut mean_dx = 0.0;
                    let mut mean_dxx = 0.0;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let dxh = g.data()[i * n + j] * gv[j];
                        mean_dx += dxh;
                        mean_dxx += dxh * xh;
                        ggain[j] += g.data()[i * n + j] * xh;
                        gbias[j] += g.data()[i * n + j];
                    }
                    mean_dx /= nn;
                    mean_dxx /= nn;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let dxh = g.data()[i * n + j] * gv[j];
                        gx[i * n + j] = inv * (dxh - mean_dx - xh * mean_dxx);
                    }
                }
                self.accum(grads, *x, Tensor::from_raw(vec![m, n], gx));
                if self.ng(*gain) {
                    let shape = self.value(*gain).shape().to_vec();
                    self.accum(grads, *gain, Tensor::from_raw(shape, ggain));
                }
                if self.ng(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    self.accum(grads, *bias, Tensor::from_raw(shape, gbias));
                }
            }
            Op::SumAll(a) => {
                let gval = g.data()[0];
                let ga = Tensor::full(self.value(*a).shape(), gval);
                self.accum(grads, *a, ga);
            }
            Op::SumRowsAll(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n..(i + 1) * n].copy_from_slice(g.data());
                }
                self.accum(grads, *a, Tensor::from_raw(vec![m, n], ga));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (m, n) = self.value(p).dims2().unwrap();
                    if self.ng(p) {
                        let gp = g.data()[start * n..(start + m) * n].to_vec();
                        self.accum(grads, p, Tensor::from_raw(vec![m, n], gp));
                    }
                    start += m;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = self.nodes[id].value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    if self.ng(p) {
                        let mut gp = vec![0.0; m * w];
                        for i in 0..m {
                            gp[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        self.accum(grads, p, Tensor::from_raw(vec![m, w], gp));
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(g.data());
                self.accum(grads, *x, Tensor::from_raw(vec![m, n], gx));
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accum(grads, *x, Tensor::from_raw(vec![m, n], gx));
            }
            Op::GatherRows { x, idx } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut gx = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        gx[i * n + j] += g.data()[r * n + j];
                    }
                }
                self.accum(grads, *x, Tensor::from_raw(vec![m, n], gx));
            }
            Op::GroupMeanRows { x, groups } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut gx = vec![0.0; m * n];
                for (p, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    for &r in grp {
                        for j in 0..n {
                            gx[r * n + j] += g.data()[p * n + j] * inv;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_raw(vec![m, n], gx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let gx = Tensor::from_raw(shape, g.data().to_vec());
                self.accum(grads, *x, gx);
            }
            Op::ProjectToPixel { x, cam } => {
                let (m, _) = self.value(*x).dims2().unwrap();
                let d = self.value(*x).data();
                let e = &cam.extrinsic;
                let mut gx = vec![0.0; m * 3];
                for i in 0..m {
                    let p = [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]];
                    let pc = crate::geometry::mat4_apply(e, p);
                    let z = safe_depth(pc[2]);
                    let clamp_live = pc[2].abs() >= MIN_VALID_DEPTH;
                    let (gu, gvv, gd) = (g.data()[i * 3], g.data()[i * 3 + 1], g.data()[i * 3 + 2]);
                    // gradient in camera frame
                    let mut gc = [0.0; 3];
                    gc[0] = gu * cam.fx / z;
                    gc[1] = gvv * cam.fy / z;
                    gc[2] = gd;
                    if clamp_live {
                        gc[2] += -gu * cam.fx * pc[0] / (z * z) - gvv * cam.fy * pc[1] / (z * z);
                    }
                    // back through the rotation: g_world = R^T g_cam
                    for c in 0..3 {
                        gx[i * 3 + c] = e[0][c] * gc[0] + e[1][c] * gc[1] + e[2][c] * gc[2];
                    }
                }
                self.accum(grads, *x, Tensor::from_raw(vec![m, 3], gx));
            }
            Op::UnprojectAtDepth { x, cam, depths } => {
                let (m, _) = self.value(*x).dims2().unwrap();
                let e = &cam.extrinsic;
                let mut gx = vec![0.0; m * 2];
                for i in 0..m {
                    // world = R^T (pc - t); dworld/dpc = R^T, so g_pc = R g_world
                    let gw = [g.data()[i * 3], g.data()[i * 3 + 1], g.data()[i * 3 + 2]];
                    let mut gpc = [0.0; 3];
                    for r in 0..3 {
                        gpc[r] = e[r][0] * gw[0] + e[r][1] * gw[1] + e[r][2] * gw[2];
                    }
                    gx[i * 2] = gpc[0] * depths[i] / cam.fx;
                    gx[i * 2 + 1] = gpc[1] * depths[i] / cam.fy;
                }
                self.accum(grads, *x, Tensor::from_raw(vec![m, 2], gx));
            }
            Op::BilinearSample { pos, map } => {
                let (m, _) = self.value(*pos).dims2().unwrap();
                let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
                let d = self.value(*pos).data();
                let md = map.data();
                let mut gx = vec![0.0; m * 2];
                for i in 0..m {
                    let (x0f, y0f) = (d[i * 2], d[i * 2 + 1]);
                    let xc = x0f.clamp(0.5, w as f64 - 0.5);
                    let yc = y0f.clamp(0.5, h as f64 - 0.5);
                    let x_live = (0.5..=w as f64 - 0.5).contains(&x0f);
                    let y_live = (0.5..=h as f64 - 0.5).contains(&y0f);
                    let xf = (xc - 0.5).floor();
                    let yf = (yc - 0.5).floor();
                    let tx = xc - 0.5 - xf;
                    let ty = yc - 0.5 - yf;
                    let x0 = xf as usize;
                    let y0 = yf as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let at = |r: usize, col: usize, ch: usize| md[(r * w + col) * c + ch];
                    let mut gtx = 0.0;
                    let mut gty = 0.0;
                    for ch in 0..c {
                        let gv = g.data()[i * c + ch];
                        gtx += gv
                            * ((at(y0, x1, ch) - at(y0, x0, ch)) * (1.0 - ty)
                                + (at(y1, x1, ch) - at(y1, x0, ch)) * ty);
                        gty += gv
                            * ((at(y1, x0, ch) - at(y0, x0, ch)) * (1.0 - tx)
                                + (at(y1, x1, ch) - at(y0, x1, ch)) * tx);
                    }
                    if x_live {
                        gx[i * 2] = gtx;
                    }
                    if y_live {
                        gx[i * 2 + 1] = gty;
                    }
                }
                self.accum(grads, *pos, Tensor::from_raw(vec![m, 2], gx));
            }
            Op::WeightedPosMean { u, s } => {
                let (m, n) = self.value(*u).dims2().unwrap();
                let ud = self.value(*u).data();
                let sd = self.value(*s).data();
                if self.ng(*u) {
                    let mut gu = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for cidx in 0..3 {
                                acc += g.data()[i * 3 + cidx] * sd[i * 3 * n + 3 * j + cidx];
                            }
                            gu[i * n + j] = acc;
                        }
                    }
                    self.accum(grads, *u, Tensor::from_raw(vec![m, n], gu));
                }
                if self.ng(*s) {
                    let mut gs = vec![0.0; m * 3 * n];
                    for i in 0..m {
                        for j in 0..n {
                            for cidx in 0..3 {
                                gs[i * 3 * n + 3 * j + cidx] = ud[i * n + j] * g.data()[i * 3 + cidx];
                            }
                        }
                    }
                    self.accum(grads, *s, Tensor::from_raw(vec![m, 3 * n], gs));
                }
            }
        }
    }
}

fn safe_depth(z: f64) -> f64 {
    if z.abs() < MIN_VALID_DEPTH {
        if z < 0.0 {
            -MIN_VALID_DEPTH
        } else {
            MIN_VALID_DEPTH
        }
    } else {
        z
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}
