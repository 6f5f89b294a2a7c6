//! Dense row-major f64 tensors.
//!
//! Everything in this crate computes in 64-bit floats; the tensor type is
//! deliberately minimal (shape + flat buffer) and the heavy lifting lives in
//! the graph ops.

use crate::error::{Error, Result};

/// Dense tensor of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite value in tensor input"));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs; skips the finiteness scan.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 1-d tensor from a slice.
    pub fn vector(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    /// 2-d tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected rank-2 tensor, got {:?}", s))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise a += b (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// C = A @ B for row-major 2-d buffers (m×k times k×n).
pub fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// C = A @ B^T (m×k times n×k).
pub fn matmul_transb_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// Numerically stable softmax of a slice into a fresh vector.
///
/// Empty input is a domain error; the output sums to 1 up to rounding.
pub fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::domain("softmax of empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("softmax of non-finite logits"));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    Ok(out)
}

/// Sinusoidal positional encoding of a scalar vector.
///
/// For each scalar `x` and `i` in `0..k` emits the pair
/// `(sin(x / t^(i/k)), cos(x / t^(i/k)))` where `2k = channels_per_scalar`,
/// concatenated over the input scalars.
pub fn sinpos_encode(x: &[f64], channels_per_scalar: usize, temperature: f64) -> Result<Vec<f64>> {
    if channels_per_scalar == 0 || !channels_per_scalar.is_multiple_of(2) {
        return Err(Error::config(format!(
            "channels_per_scalar must be a positive even count, got {channels_per_scalar}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("sinpos temperature must be positive"));
    }
    let k = channels_per_scalar / 2;
    let mut out = Vec::with_capacity(x.len() * channels_per_scalar);
    for &xi in x {
        for i in 0..k {
            let inv = 1.0 / temperature.powf(i as f64 / k as f64);
            out.push((xi * inv).sin());
            out.push((xi * inv).cos());
        }
    }
    Ok(out)
}

/// Population-variance layer norm of a single vector.
pub fn layer_norm_slice(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::shape("layer_norm length mismatch"));
    }
    if !(eps > 0.0) {
        return Err(Error::config("layer_norm eps must be positive"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_nan_and_bad_shape() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn sinpos_zero_input() {
        // sin 0 = 0, cos 0 = 1 for every frequency
        let e = sinpos_encode(&[0.0], 4, 10000.0).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sinpos_quarter_turn_first_channel() {
        let e = sinpos_encode(&[std::f64::consts::FRAC_PI_2], 2, 10000.0).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sinpos_direct_evaluation() {
        // x=2, 2k=4, tau=10000: freqs are 1 and 1e4^(1/2)=100
        let e = sinpos_encode(&[2.0], 4, 10000.0).unwrap();
        let expect = [2.0f64.sin(), 2.0f64.cos(), 0.02f64.sin(), 0.02f64.cos()];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sinpos_rejects_odd_channels() {
        assert!(sinpos_encode(&[1.0], 3, 10000.0).is_err());
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let p = softmax_slice(&[2.5, 2.5, 2.5]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = softmax_slice(&[0.3, -1.2, 2.0]).unwrap();
        let b = softmax_slice(&[5.3, 3.8, 7.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let s: f64 = a.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_direct_value() {
        let p = softmax_slice(&[0.0, 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_is_domain_error() {
        assert!(softmax_slice(&[]).is_err());
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let y = layer_norm_slice(&[3.0, 3.0, 3.0], &[1.0; 3], &[0.0; 3], 1e-12).unwrap();
        for v in y {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_point_case() {
        // mean 2, population std 1
        let y = layer_norm_slice(&[1.0, 3.0], &[1.0; 2], &[0.0; 2], 1e-30).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-9);
        assert!((y[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let x = [0.4, -1.3, 2.2, 0.9, -0.5];
        let y = layer_norm_slice(&x, &[1.0; 5], &[0.0; 5], 1e-12).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_small_case() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_into(&mut c, &a, &b, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
