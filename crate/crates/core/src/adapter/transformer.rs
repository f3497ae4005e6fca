//! Permutation-equivariant transformer adapter.
//!
//! Window features are projected to tokens, passed through pre-LN encoder
//! blocks with unmasked softmax attention over all windows and no positional
//! encoding, projected back to the feature dimension and mixed with the
//! input: `f* = alpha * f + (1 - alpha) * T(F)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use crate::linalg::{dot, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub token_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub blocks: usize,
}

impl Default for TransformerConfig {
    /// Two blocks of 256-wide tokens with 4 heads and a 4x MLP.
    fn default() -> Self {
        Self {
            token_dim: 256,
            heads: 4,
            mlp_dim: 1024,
            blocks: 2,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.heads == 0 || self.mlp_dim == 0 {
            return Err(Error::InvalidArgument(format!("degenerate adapter config {self:?}")));
        }
        if !self.token_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "token width {} not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.heads
    }
}

/// How the output projection starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputInit {
    /// Zero weights: the untrained adapter returns `alpha * f`, which
    /// classifies exactly like the zero-shot model.
    Zero,
    Xavier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerAdapter {
    pub config: TransformerConfig,
    pub alpha: f64,
    pub in_proj: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub out_proj: Linear,
}

struct BlockCache {
    x: Matrix,
    ln1: LayerNormCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// One `M x M` attention matrix per head.
    attn: Vec<Matrix>,
    o: Matrix,
    ln2: LayerNormCache,
    b: Matrix,
    u: Matrix,
    g: Matrix,
}

pub(crate) struct TransformerCache {
    input: Matrix,
    tokens: Matrix,
    blocks: Vec<BlockCache>,
    hidden: Matrix,
}

impl EncoderBlock {
    fn new(cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let t = cfg.token_dim;
        Self {
            ln1: LayerNorm::new(t),
            query: Linear::xavier(t, t, rng),
            key: Linear::xavier(t, t, rng),
            value: Linear::xavier(t, t, rng),
            attn_out: Linear::xavier(t, t, rng),
            ln2: LayerNorm::new(t),
            fc1: Linear::xavier(t, cfg.mlp_dim, rng),
            fc2: Linear::xavier(cfg.mlp_dim, t, rng),
        }
    }

    fn zeros(cfg: &TransformerConfig) -> Self {
        let t = cfg.token_dim;
        Self {
            ln1: LayerNorm::zeros(t),
            query: Linear::zeros(t, t),
            key: Linear::zeros(t, t),
            value: Linear::zeros(t, t),
            attn_out: Linear::zeros(t, t),
            ln2: LayerNorm::zeros(t),
            fc1: Linear::zeros(t, cfg.mlp_dim),
            fc2: Linear::zeros(cfg.mlp_dim, t),
        }
    }

    fn forward(&self, x: &Matrix, heads: usize) -> (Matrix, BlockCache) {
        let (m, t) = (x.rows(), x.cols());
        let hd = t / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let (a, ln1) = self.ln1.forward(x);
        let q = self.query.forward(&a);
        let k = self.key.forward(&a);
        let v = self.value.forward(&a);

        let mut o = Matrix::zeros(m, t);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let mut p = Matrix::zeros(m, m);
            for i in 0..m {
                let qi = &q.row(i)[cols.clone()];
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            for i in 0..m {
                for j in 0..m {
                    let pij = p.get(i, j);
                    let vj = &v.row(j)[cols.clone()];
                    let oi = &mut o.row_mut(i)[cols.clone()];
                    for (dst, &vv) in oi.iter_mut().zip(vj) {
                        *dst += pij * vv;
                    }
                }
            }
            attn.push(p);
        }

        let mut x1 = self.attn_out.forward(&o);
        x1.add_assign(x);

        let (b, ln2) = self.ln2.forward(&x1);
        let u = self.fc1.forward(&b);
        let g = u.map(gelu);
        let mut out = self.fc2.forward(&g);
        out.add_assign(&x1);

        let cache = BlockCache {
            x: x.clone(),
            ln1,
            a,
            q,
            k,
            v,
            attn,
            o,
            ln2,
            b,
            u,
            g,
        };
        (out, cache)
    }

    #[allow(clippy::needless_range_loop)] // i and j index several matrices at once
    fn backward(&self, c: &BlockCache, dout: &Matrix, heads: usize, grad: &mut EncoderBlock) -> Matrix {
        let (m, t) = (dout.rows(), dout.cols());
        let hd = t / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        // MLP branch.
        let dg = self.fc2.backward(&c.g, dout, &mut grad.fc2);
        let mut du = dg;
        for (d, &u) in du.as_mut_slice().iter_mut().zip(c.u.as_slice()) {
            *d *= gelu_grad(u);
        }
        let db = self.fc1.backward(&c.b, &du, &mut grad.fc1);
        let mut dx1 = self.ln2.backward(&c.ln2, &db, &mut grad.ln2);
        dx1.add_assign(dout);

        // Attention branch.
        let d_o = self.attn_out.backward(&c.o, &dx1, &mut grad.attn_out);
        let mut dq = Matrix::zeros(m, t);
        let mut dk = Matrix::zeros(m, t);
        let mut dv = Matrix::zeros(m, t);
        let mut dp = vec![0.0; m];
        for (h, p) in c.attn.iter().enumerate() {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..m {
                let doi = &d_o.row(i)[cols.clone()];
                for j in 0..m {
                    let pij = p.get(i, j);
                    dp[j] = dot(doi, &c.v.row(j)[cols.clone()]);
                    let dvj = &mut dv.row_mut(j)[cols.clone()];
                    for (dst, &g) in dvj.iter_mut().zip(doi) {
                        *dst += pij * g;
                    }
                }
                let inner: f64 = (0..m).map(|j| p.get(i, j) * dp[j]).sum();
                for j in 0..m {
                    let ds = p.get(i, j) * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &c.k.row(j)[cols.clone()];
                    let dqi = &mut dq.row_mut(i)[cols.clone()];
                    for (dst, &kv) in dqi.iter_mut().zip(kj) {
                        *dst += ds * kv;
                    }
                    let qi = &c.q.row(i)[cols.clone()];
                    let dkj = &mut dk.row_mut(j)[cols.clone()];
                    for (dst, &qv) in dkj.iter_mut().zip(qi) {
                        *dst += ds * qv;
                    }
                }
            }
        }
        let mut da = self.query.backward(&c.a, &dq, &mut grad.query);
        da.add_assign(&self.key.backward(&c.a, &dk, &mut grad.key));
        da.add_assign(&self.value.backward(&c.a, &dv, &mut grad.value));
        let mut dx = self.ln1.backward(&c.ln1, &da, &mut grad.ln1);
        dx.add_assign(&dx1);
        debug_assert_eq!(dx.rows(), c.x.rows());
        dx
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(16);
        v.extend(self.ln1.tensors());
        v.extend(self.query.tensors());
        v.extend(self.key.tensors());
        v.extend(self.value.tensors());
        v.extend(self.attn_out.tensors());
        v.extend(self.ln2.tensors());
        v.extend(self.fc1.tensors());
        v.extend(self.fc2.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(16);
        v.extend(self.ln1.tensors_mut());
        v.extend(self.query.tensors_mut());
        v.extend(self.key.tensors_mut());
        v.extend(self.value.tensors_mut());
        v.extend(self.attn_out.tensors_mut());
        v.extend(self.ln2.tensors_mut());
        v.extend(self.fc1.tensors_mut());
        v.extend(self.fc2.tensors_mut());
        v
    }
}

const BLOCK_TENSOR_NAMES: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "query.weight",
    "query.bias",
    "key.weight",
    "key.bias",
    "value.weight",
    "value.bias",
    "attn_out.weight",
    "attn_out.bias",
    "ln2.gamma",
    "ln2.beta",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

impl TransformerAdapter {
    /// Xavier-uniform projections, unit LayerNorm scales, zero biases and a
    /// zero output projection.
    pub fn new(config: TransformerConfig, dim: usize, alpha: f64, seed: u64) -> Result<Self> {
        Self::with_init(config, dim, alpha, seed, OutputInit::Zero)
    }

    pub fn with_init(config: TransformerConfig, dim: usize, alpha: f64, seed: u64, output: OutputInit) -> Result<Self> {
        config.validate()?;
        check_alpha(alpha)?;
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_proj = Linear::xavier(dim, config.token_dim, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| EncoderBlock::new(&config, &mut rng))
            .collect();
        let out_proj = match output {
            OutputInit::Zero => Linear::zeros(config.token_dim, dim),
            OutputInit::Xavier => Linear::xavier(config.token_dim, dim, &mut rng),
        };
        Ok(Self {
            config,
            alpha,
            in_proj,
            blocks,
            out_proj,
        })
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            alpha: self.alpha,
            in_proj: Linear::zeros(self.in_proj.inputs(), self.config.token_dim),
            blocks: self.blocks.iter().map(|_| EncoderBlock::zeros(&self.config)).collect(),
            out_proj: Linear::zeros(self.config.token_dim, self.out_proj.outputs()),
        }
    }

    pub fn dim(&self) -> usize {
        self.in_proj.inputs()
    }

    /// `alpha * F + (1 - alpha) * T(F)`, row for row.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(features)?.0)
    }

    pub(crate) fn forward_cached(&self, features: &Matrix) -> Result<(Matrix, TransformerCache)> {
        if features.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "adapter expects {} dims, features have {}",
                self.dim(),
                features.cols()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::Empty("adapter input has no windows".into()));
        }
        let tokens = self.in_proj.forward(features);
        let mut x = tokens.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, self.config.heads);
            caches.push(c);
            x = y;
        }
        let adapted = self.out_proj.forward(&x);
        let out = mix(features, &adapted, self.alpha);
        let cache = TransformerCache {
            input: features.clone(),
            tokens,
            blocks: caches,
            hidden: x,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients and returns `dL/dF`.
    pub(crate) fn backward(&self, cache: &TransformerCache, dout: &Matrix, grad: &mut TransformerAdapter) -> Matrix {
        let alpha = self.alpha;
        let d_adapted = dout.map(|v| (1.0 - alpha) * v);
        let mut dx = self.out_proj.backward(&cache.hidden, &d_adapted, &mut grad.out_proj);
        for ((block, c), g) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            dx = block.backward(c, &dx, self.config.heads, g);
        }
        debug_assert_eq!(dx.rows(), cache.tokens.rows());
        let mut dfeat = self.in_proj.backward(&cache.input, &dx, &mut grad.in_proj);
        for (d, &g) in dfeat.as_mut_slice().iter_mut().zip(dout.as_slice()) {
            *d += alpha * g;
        }
        dfeat
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.in_proj.tensors().to_vec();
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend(self.out_proj.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.extend(self.in_proj.tensors_mut());
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend(self.out_proj.tensors_mut());
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = vec!["in_proj.weight".to_string(), "in_proj.bias".to_string()];
        for i in 0..self.blocks.len() {
            v.extend(BLOCK_TENSOR_NAMES.iter().map(|n| format!("blocks.{i}.{n}")));
        }
        v.push("out_proj.weight".into());
        v.push("out_proj.bias".into());
        v
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("residual ratio {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `alpha * original + (1 - alpha) * adapted`. With `alpha == 1` this returns
/// `original` bit for bit.
pub(crate) fn mix(original: &Matrix, adapted: &Matrix, alpha: f64) -> Matrix {
    let mut out = original.clone();
    for (o, &a) in out.as_mut_slice().iter_mut().zip(adapted.as_slice()) {
        *o = alpha * *o + (1.0 - alpha) * a;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransformerConfig {
        TransformerConfig {
            token_dim: 8,
            heads: 2,
            mlp_dim: 12,
            blocks: 2,
        }
    }

    fn features(m: usize, d: usize) -> Matrix {
        let data = (0..m * d).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.5).collect();
        Matrix::from_vec(m, d, data).unwrap()
    }

    #[test]
    fn default_architecture() {
        let a = TransformerAdapter::new(TransformerConfig::default(), 16, 0.5, 0).unwrap();
        assert_eq!(a.config.token_dim, 256);
        assert_eq!(a.config.heads, 4);
        assert_eq!(a.blocks.len(), 2);
        assert_eq!(a.blocks[0].fc1.outputs(), 1024);
        assert_eq!(a.tensors().len(), a.tensor_names().len());
        // No positional parameters: every tensor belongs to a projection or a norm.
        assert!(a.tensor_names().iter().all(|n| !n.contains("pos")));
    }

    #[test]
    fn alpha_one_is_identity() {
        let a = TransformerAdapter::with_init(small(), 5, 1.0, 3, OutputInit::Xavier).unwrap();
        let f = features(3, 5);
        assert_eq!(a.forward(&f).unwrap(), f);
    }

    #[test]
    fn zero_output_projection_scales_input() {
        let a = TransformerAdapter::new(small(), 5, 0.8, 3).unwrap();
        let f = features(4, 5);
        assert_eq!(a.forward(&f).unwrap(), f.map(|v| 0.8 * v));
    }

    #[test]
    fn rejects_bad_shapes() {
        let a = TransformerAdapter::new(small(), 5, 0.5, 0).unwrap();
        assert!(a.forward(&features(2, 4)).is_err());
        assert!(a.forward(&Matrix::zeros(0, 5)).is_err());
        let bad = TransformerConfig {
            token_dim: 10,
            heads: 4,
            ..small()
        };
        assert!(TransformerAdapter::new(bad, 5, 0.5, 0).is_err());
        assert!(TransformerAdapter::new(small(), 5, 1.5, 0).is_err());
    }
}
