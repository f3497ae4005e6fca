//! Zero-shot classification by cosine similarity against text embeddings,
//! order-invariant pooling over windows and logit ensembling.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::bytes::{put_short_str, Reader};
use crate::embed::EmbeddingSet;
use crate::events::EventStream;
use crate::frame::{window_ranges, WindowingConfig};
use crate::linalg::{argmax, dot, l2_norm, softmax, Matrix};
use crate::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const LGT1_MAGIC: &[u8; 4] = b"LGT1";

/// A categorical distribution over `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(Vec<f64>);

impl ClassProbabilities {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "probabilities must be finite and non-negative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Most likely class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    /// `ln(max(p, 1e-12))` per class.
    pub fn log_probs(&self) -> Vec<f64> {
        self.0.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect()
    }
}

/// Rows scaled to unit length. Zero rows stay zero.
pub fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = l2_norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// `logit_scale * cos(w_k, f)` for every class, with `unit_weights` already
/// row-normalised.
pub fn cosine_logits(feature: &[f64], unit_weights: &Matrix, logit_scale: f64) -> Vec<f64> {
    let n = l2_norm(feature);
    let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
    unit_weights
        .iter_rows()
        .map(|w| logit_scale * dot(w, feature) * inv)
        .collect()
}

fn check_classifier(dim: usize, weights: &Matrix) -> Result<()> {
    if weights.cols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "feature has {dim} dims, text weights have {}",
            weights.cols()
        )));
    }
    if weights.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            weights.rows()
        )));
    }
    Ok(())
}

/// `softmax(logit_scale * cos(w_k, f))` over the `K` text rows.
pub fn classify_window(feature: &[f64], weights: &Matrix, logit_scale: f64) -> Result<ClassProbabilities> {
    check_classifier(feature.len(), weights)?;
    let unit = normalize_rows(weights);
    Ok(ClassProbabilities(softmax(&cosine_logits(feature, &unit, logit_scale))))
}

/// Per-window probabilities for every row of `features`.
pub fn classify_windows(features: &Matrix, weights: &Matrix, logit_scale: f64) -> Result<Vec<ClassProbabilities>> {
    check_classifier(features.cols(), weights)?;
    let unit = normalize_rows(weights);
    Ok(features
        .iter_rows()
        .map(|f| ClassProbabilities(softmax(&cosine_logits(f, &unit, logit_scale))))
        .collect())
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Pairwise sum in a fixed tree shape.
fn pairwise_sum(rows: &[&[f64]], out: &mut [f64]) {
    match rows.len() {
        0 => out.iter_mut().for_each(|o| *o = 0.0),
        1 => out.copy_from_slice(rows[0]),
        n => {
            let (left, right) = rows.split_at(n / 2);
            let mut r = vec![0.0; out.len()];
            pairwise_sum(left, out);
            pairwise_sum(right, &mut r);
            out.iter_mut().zip(&r).for_each(|(o, v)| *o += v);
        }
    }
}

/// Mean of the per-window distributions.
///
/// Windows are summed in lexicographic order of their probability vectors,
/// so any permutation of the input gives a bit-identical result.
pub fn aggregate(per_window: &[ClassProbabilities]) -> Result<ClassProbabilities> {
    let first = per_window
        .first()
        .ok_or_else(|| Error::Empty("no windows to aggregate".into()))?;
    let k = first.num_classes();
    if per_window.iter().any(|p| p.num_classes() != k) {
        return Err(Error::DimensionMismatch(
            "windows disagree on the number of classes".into(),
        ));
    }
    let mut rows: Vec<&[f64]> = per_window.iter().map(|p| p.as_slice()).collect();
    rows.sort_by(|a, b| lexicographic(a, b));
    let mut sum = vec![0.0; k];
    pairwise_sum(&rows, &mut sum);
    let m = per_window.len() as f64;
    Ok(ClassProbabilities(sum.into_iter().map(|s| s / m).collect()))
}

/// Classify each window feature and pool. Returns the winning class and the
/// pooled distribution.
pub fn predict_features(features: &Matrix, weights: &Matrix, logit_scale: f64) -> Result<(usize, ClassProbabilities)> {
    let per_window = classify_windows(features, weights, logit_scale)?;
    let probs = aggregate(&per_window)?;
    Ok((probs.argmax(), probs))
}

/// Zero-shot prediction for a stream whose window features (one row per
/// window, in window order) are given.
pub fn predict(
    stream: &EventStream,
    text: &EmbeddingSet,
    visual_features: &EmbeddingSet,
    cfg: &WindowingConfig,
) -> Result<(usize, ClassProbabilities)> {
    let windows = window_ranges(stream.len(), cfg).len();
    if windows != visual_features.len() {
        return Err(Error::DimensionMismatch(format!(
            "stream {:?} has {windows} windows but {} features were given",
            stream.id(),
            visual_features.len()
        )));
    }
    predict_features(&visual_features.to_matrix(), &text.to_matrix(), text.logit_scale as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleConfig {
    /// Weight on the external classifier's logits.
    lambda: f64,
}

impl EnsembleConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!(
                "ensemble lambda {lambda} outside [0, 1]"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

/// `softmax((1 - lambda) * ours + lambda * external)`.
pub fn ensemble(ours: &[f64], external: &[f64], cfg: &EnsembleConfig) -> Result<(usize, ClassProbabilities)> {
    if ours.len() != external.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} logits",
            ours.len(),
            external.len()
        )));
    }
    if ours.is_empty() {
        return Err(Error::Empty("logits".into()));
    }
    if ours.iter().chain(external).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite logit".into()));
    }
    let l = cfg.lambda;
    let combined: Vec<f64> = ours.iter().zip(external).map(|(a, b)| (1.0 - l) * a + l * b).collect();
    let probs = ClassProbabilities(softmax(&combined));
    Ok((argmax(&combined), probs))
}

/// External classifier logits keyed by sample id (LGT1 file).
///
/// ```text
/// "LGT1" | u32 K | u64 R | R x (u16 len, UTF-8 id) | R x K f32
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalLogits {
    pub num_classes: usize,
    pub ids: Vec<String>,
    pub logits: Vec<f32>,
}

impl ExternalLogits {
    pub fn new(num_classes: usize, ids: Vec<String>, logits: Vec<f32>) -> Result<Self> {
        if logits.len() != ids.len() * num_classes {
            return Err(Error::DimensionMismatch(format!(
                "{} ids x {num_classes} classes needs {} logits, got {}",
                ids.len(),
                ids.len() * num_classes,
                logits.len()
            )));
        }
        Ok(Self {
            num_classes,
            ids,
            logits,
        })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.logits[r * self.num_classes..(r + 1) * self.num_classes]
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let k =
            u32::try_from(self.num_classes).map_err(|_| Error::InvalidArgument("class count exceeds u32".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(LGT1_MAGIC);
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            put_short_str(&mut out, id)?;
        }
        for v in &self.logits {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "LGT1");
        r.magic(LGT1_MAGIC)?;
        let k = r.u32()? as usize;
        let rows = r.u64()?;
        if rows > r.remaining() as u64 {
            return Err(Error::Truncated(format!("LGT1 announces {rows} rows")));
        }
        let ids = (0..rows).map(|_| r.short_str()).collect::<Result<Vec<_>>>()?;
        if r.remaining() as u128 != ids.len() as u128 * k as u128 * 4 {
            return Err(Error::DimensionMismatch(format!(
                "LGT1 header says {}x{k} logits but {} bytes follow",
                ids.len(),
                r.remaining()
            )));
        }
        let mut logits = Vec::with_capacity(ids.len() * k);
        for _ in 0..ids.len() * k {
            logits.push(r.f32()?);
        }
        for (row, chunk) in logits.chunks_exact(k.max(1)).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row });
            }
        }
        Self::new(k, ids, logits)
    }
}
