//! Parameter store plus the parameterized kernels (MLP, attention).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Tensor;

/// Named, slot-addressed parameter tensors. Slots are handed out in creation
/// order, which makes checkpoints and gradient vectors positionally stable
/// for a fixed model configuration.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn set(&mut self, slot: usize, t: Tensor) {
        self.tensors[slot] = t;
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Flatten all parameters into one vector (used by gradient checks).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_values() {
            return Err(Error::shape("unflatten length mismatch"));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Glorot-uniform init in +-sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_raw(vec![fan_in, fan_out], data)
}

/// Hidden-layer activation; the final layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// An MLP described by its layer widths; weights live in the store.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// (weight, bias) slot per affine layer.
    pub layers: Vec<(usize, usize)>,
}

impl MlpSpec {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("mlp {name}: bad widths {widths:?}")));
        }
        let mut layers = Vec::new();
        for i in 0..widths.len() - 1 {
            let w = store.add(format!("{name}.w{i}"), glorot_uniform(rng, widths[i], widths[i + 1]));
            let b = store.add(format!("{name}.b{i}"), Tensor::zeros(&[widths[i + 1]]));
            layers.push((w, b));
        }
        Ok(MlpSpec { widths: widths.to_vec(), activation: Activation::Relu, layers })
    }

    /// All-zero parameters; handy in tests where the output must collapse to
    /// the final bias.
    pub fn build_zeroed(store: &mut ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let spec = Self::build(store, &mut rng, name, widths)?;
        for &(w, b) in &spec.layers {
            let sw = store.get(w).shape().to_vec();
            store.set(w, Tensor::zeros(&sw));
            let sb = store.get(b).shape().to_vec();
            store.set(b, Tensor::zeros(&sb));
        }
        Ok(spec)
    }

    pub fn in_width(&self) -> usize {
        self.widths[0]
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Run an MLP over the rows of `x` (M x in -> M x out).
pub fn mlp_forward(g: &mut Graph, store: &ParamStore, spec: &MlpSpec, x: NodeId) -> Result<NodeId> {
    let (_, n) = g.value(x).dims2()?;
    if n != spec.in_width() {
        return Err(Error::shape(format!(
            "mlp_forward: input width {n} but spec wants {}",
            spec.in_width()
        )));
    }
    let mut h = x;
    let last = spec.layers.len() - 1;
    for (i, &(w, b)) in spec.layers.iter().enumerate() {
        let wn = g.param(w, store.get(w));
        let bn = {
            let t = store.get(b);
            
            g.param(b, t)
        };
        h = g.matmul(h, wn)?;
        h = g.add_row(h, bn)?;
        if i != last {
            h = match spec.activation {
                Activation::Relu => g.relu(h),
            };
        }
    }
    Ok(h)
}

/// Multi-head attention projections; all maps are C -> C.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub width: usize,
    pub heads: usize,
    pub wq: (usize, usize),
    pub wk: (usize, usize),
    pub wv: (usize, usize),
    pub wo: (usize, usize),
}

impl AttentionSpec {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention {name}: width {width} not divisible by heads {heads}"
            )));
        }
        let proj = |store: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str| {
            let w = store.add(format!("{name}.{tag}.w"), glorot_uniform(rng, width, width));
            let b = store.add(format!("{name}.{tag}.b"), Tensor::zeros(&[width]));
            (w, b)
        };
        Ok(AttentionSpec {
            width,
            heads,
            wq: proj(store, rng, "q"),
            wk: proj(store, rng, "k"),
            wv: proj(store, rng, "v"),
            wo: proj(store, rng, "o"),
        })
    }
}

/// Scaled dot-product multi-head attention with per-head width C/h scaling
/// and a final output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    spec: &AttentionSpec,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let (_, cq) = g.value(q).dims2()?;
    let (nk, ck) = g.value(k).dims2()?;
    let (nv, cv) = g.value(v).dims2()?;
    if cq != spec.width || ck != spec.width || cv != spec.width {
        return Err(Error::shape("multi_head_attention: width mismatch"));
    }
    if nk != nv {
        return Err(Error::shape("multi_head_attention: key/value count mismatch"));
    }
    if nk == 0 {
        return Err(Error::domain("multi_head_attention with zero keys"));
    }
    let apply = |g: &mut Graph, (w, b): (usize, usize), x: NodeId| -> Result<NodeId> {
        let wn = g.param(w, store.get(w));
        let bn = g.param(b, store.get(b));
        let y = g.matmul(x, wn)?;
        g.add_row(y, bn)
    };
    let qp = apply(g, spec.wq, q)?;
    let kp = apply(g, spec.wk, k)?;
    let vp = apply(g, spec.wv, v)?;
    let dh = spec.width / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let qh = g.slice_cols(qp, h * dh, dh)?;
        let kh = g.slice_cols(kp, h * dh, dh)?;
        let vh = g.slice_cols(vp, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.row_softmax(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    apply(g, spec.wo, cat)
}

/// Layer-norm affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct LnParams {
    pub gain: usize,
    pub bias: usize,
}

impl LnParams {
    pub fn build(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[width]));
        LnParams { gain, bias }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId, eps: f64) -> Result<NodeId> {
        let gain = g.param(self.gain, store.get(self.gain));
        let bias = g.param(self.bias, store.get(self.bias));
        g.layer_norm_rows(x, gain, bias, eps)
    }
}
