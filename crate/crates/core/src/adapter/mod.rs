//! Trainable feature adapters on top of frozen embeddings.
//!
//! An [`AdaptedClassifier`] pairs a visual adapter (identity, transformer or
//! MLP) with tuned text weights. With the identity adapter and untouched
//! text weights it is exactly the zero-shot classifier.

mod checkpoint;
mod layers;
mod mlp;
mod transformer;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, read_checkpoint, write_checkpoint};
pub use layers::{LayerNorm, Linear};
pub use mlp::{MlpAdapter, DEFAULT_MAX_WINDOWS};
pub use transformer::{EncoderBlock, OutputInit, TransformerAdapter, TransformerConfig};

use crate::linalg::Matrix;
use crate::zeroshot::{aggregate, classify_windows, ClassProbabilities};
use crate::{Error, Result};

/// Residual ratio when only a visual adapter is trained.
pub const ALPHA_VISUAL: f64 = 0.5;
/// Residual ratio when visual and text adapters are trained together.
pub const ALPHA_JOINT: f64 = 0.8;
/// Residual ratio for large-vocabulary datasets.
pub const ALPHA_LARGE_VOCAB: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub enum VisualAdapter {
    Identity,
    Transformer(TransformerAdapter),
    Mlp(MlpAdapter),
}

pub(crate) enum VisualCache {
    Identity,
    Transformer(transformer::TransformerCache),
    Mlp(mlp::MlpCache),
}

impl VisualAdapter {
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        match self {
            VisualAdapter::Identity => Ok(features.clone()),
            VisualAdapter::Transformer(t) => t.forward(features),
            VisualAdapter::Mlp(m) => m.forward(features),
        }
    }

    pub(crate) fn forward_cached(&self, features: &Matrix) -> Result<(Matrix, VisualCache)> {
        match self {
            VisualAdapter::Identity => Ok((features.clone(), VisualCache::Identity)),
            VisualAdapter::Transformer(t) => {
                let (y, c) = t.forward_cached(features)?;
                Ok((y, VisualCache::Transformer(c)))
            }
            VisualAdapter::Mlp(m) => {
                let (y, c) = m.forward_cached(features)?;
                Ok((y, VisualCache::Mlp(c)))
            }
        }
    }

    /// Accumulates into `grad` (same variant as `self`) and returns `dL/dF`.
    pub(crate) fn backward(&self, cache: &VisualCache, dout: &Matrix, grad: &mut VisualAdapter) -> Matrix {
        match (self, cache, grad) {
            (VisualAdapter::Identity, VisualCache::Identity, VisualAdapter::Identity) => dout.clone(),
            (VisualAdapter::Transformer(t), VisualCache::Transformer(c), VisualAdapter::Transformer(g)) => {
                t.backward(c, dout, g)
            }
            (VisualAdapter::Mlp(m), VisualCache::Mlp(c), VisualAdapter::Mlp(g)) => m.backward(c, dout, g),
            _ => unreachable!("gradient buffer does not match the adapter variant"),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        match self {
            VisualAdapter::Identity => VisualAdapter::Identity,
            VisualAdapter::Transformer(t) => VisualAdapter::Transformer(t.zeros_like()),
            VisualAdapter::Mlp(m) => VisualAdapter::Mlp(m.zeros_like()),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            VisualAdapter::Identity => Vec::new(),
            VisualAdapter::Transformer(t) => t.tensors(),
            VisualAdapter::Mlp(m) => m.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            VisualAdapter::Identity => Vec::new(),
            VisualAdapter::Transformer(t) => t.tensors_mut(),
            VisualAdapter::Mlp(m) => m.tensors_mut(),
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let (prefix, names) = match self {
            VisualAdapter::Identity => return Vec::new(),
            VisualAdapter::Transformer(t) => ("transformer", t.tensor_names()),
            VisualAdapter::Mlp(m) => ("mlp", m.tensor_names()),
        };
        names.into_iter().map(|n| format!("{prefix}.{n}")).collect()
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            VisualAdapter::Identity => None,
            VisualAdapter::Transformer(t) => Some(t.dim()),
            VisualAdapter::Mlp(m) => Some(m.dim()),
        }
    }
}

/// Visual adapter, tuned text weights and the cosine-softmax scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedClassifier {
    pub visual: VisualAdapter,
    /// `K x D` classifier weights, initialised from the text embeddings.
    pub text: Matrix,
    pub logit_scale: f64,
}

impl AdaptedClassifier {
    pub fn new(visual: VisualAdapter, text: Matrix, logit_scale: f64) -> Result<Self> {
        if let Some(d) = visual.dim() {
            if d != text.cols() {
                return Err(Error::DimensionMismatch(format!(
                    "visual adapter works in {d} dims, text weights have {}",
                    text.cols()
                )));
            }
        }
        if text.rows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                text.rows()
            )));
        }
        if !(logit_scale.is_finite() && logit_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "logit scale {logit_scale} must be positive"
            )));
        }
        Ok(Self {
            visual,
            text,
            logit_scale,
        })
    }

    /// The zero-shot classifier: identity adapter, raw text embeddings.
    pub fn zero_shot(text: Matrix, logit_scale: f64) -> Result<Self> {
        Self::new(VisualAdapter::Identity, text, logit_scale)
    }

    pub fn num_classes(&self) -> usize {
        self.text.rows()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    /// Adapt the window features, classify each adapted window against the
    /// tuned text weights and pool.
    pub fn predict(&self, features: &Matrix) -> Result<ClassProbabilities> {
        let adapted = self.visual.forward(features)?;
        aggregate(&classify_windows(&adapted, &self.text, self.logit_scale)?)
    }

    /// A same-shaped model with every parameter zero, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            visual: self.visual.zeros_like(),
            text: Matrix::zeros(self.text.rows(), self.text.cols()),
            logit_scale: self.logit_scale,
        }
    }

    /// Visual tensors in declaration order, then the text weights.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.visual.tensors();
        v.push(self.text.as_slice());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.visual.tensors_mut();
        v.push(self.text.as_mut_slice());
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = self.visual.tensor_names();
        v.push("text.weight".into());
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Free-function form of [`AdaptedClassifier::predict`].
pub fn adapted_predict(model: &AdaptedClassifier, features: &Matrix) -> Result<ClassProbabilities> {
    model.predict(features)
}
