//! `ADP1` adapter checkpoints.
//!
//! Layout (little-endian): magic `ADP1`, u8 visual kind (0 identity,
//! 1 transformer, 2 MLP), u32 D, u32 K, f64 logit scale, kind-specific
//! hyperparameters, u64 parameter count, then every parameter as f64 in
//! [`AdaptedClassifier::tensors`] order. Round trips are bit-exact.

use std::io::{Read, Write};

use super::{AdaptedClassifier, MlpAdapter, OutputInit, TransformerAdapter, TransformerConfig, VisualAdapter};
use crate::bytes::Reader;
use crate::linalg::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ADP1";

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

pub fn checkpoint_bytes(model: &AdaptedClassifier) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let tag: u8 = match model.visual {
        VisualAdapter::Identity => 0,
        VisualAdapter::Transformer(_) => 1,
        VisualAdapter::Mlp(_) => 2,
    };
    out.push(tag);
    out.extend_from_slice(&u32_of(model.dim(), "dimension")?.to_le_bytes());
    out.extend_from_slice(&u32_of(model.num_classes(), "class count")?.to_le_bytes());
    out.extend_from_slice(&model.logit_scale.to_le_bytes());
    match &model.visual {
        VisualAdapter::Identity => {}
        VisualAdapter::Transformer(t) => {
            out.extend_from_slice(&t.alpha.to_le_bytes());
            let c = t.config;
            for v in [c.token_dim, c.heads, c.mlp_dim, c.blocks] {
                out.extend_from_slice(&u32_of(v, "transformer hyperparameter")?.to_le_bytes());
            }
        }
        VisualAdapter::Mlp(m) => {
            out.extend_from_slice(&m.ratio.to_le_bytes());
            out.extend_from_slice(&u32_of(m.max_windows, "window capacity")?.to_le_bytes());
        }
    }
    out.extend_from_slice(&(model.num_parameters() as u64).to_le_bytes());
    for t in model.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<AdaptedClassifier> {
    let mut r = Reader::new(bytes, "ADP1");
    r.magic(MAGIC)?;
    let tag = r.u8()?;
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let scale = r.f64()?;
    if dim == 0 {
        return Err(Error::MalformedHeader("checkpoint dimension is 0".into()));
    }
    let visual = match tag {
        0 => VisualAdapter::Identity,
        1 => {
            let alpha = r.f64()?;
            let config = TransformerConfig {
                token_dim: r.u32()? as usize,
                heads: r.u32()? as usize,
                mlp_dim: r.u32()? as usize,
                blocks: r.u32()? as usize,
            };
            VisualAdapter::Transformer(
                TransformerAdapter::with_init(config, dim, alpha, 0, OutputInit::Zero)
                    .map_err(|e| Error::MalformedHeader(e.to_string()))?,
            )
        }
        2 => {
            let ratio = r.f64()?;
            let cap = r.u32()? as usize;
            // Validate through the public constructor before allocating zeros.
            MlpAdapter::new(1, cap.max(1), ratio, 0).map_err(|e| Error::MalformedHeader(e.to_string()))?;
            if cap == 0 {
                return Err(Error::MalformedHeader("MLP window capacity is 0".into()));
            }
            VisualAdapter::Mlp(MlpAdapter::zeros(dim, cap, ratio))
        }
        other => return Err(Error::MalformedHeader(format!("unknown adapter kind {other}"))),
    };
    let text = Matrix::zeros(classes, dim);
    let mut model = AdaptedClassifier::new(visual, text, scale).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let count = r.u64()?;
    if count != model.num_parameters() as u64 {
        return Err(Error::MalformedHeader(format!(
            "header declares {count} parameters, architecture has {}",
            model.num_parameters()
        )));
    }
    if r.remaining() != model.num_parameters() * 8 {
        return Err(Error::Truncated(format!(
            "ADP1: expected {} parameter bytes, found {}",
            model.num_parameters() * 8,
            r.remaining()
        )));
    }
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = r.f64()?;
        }
    }
    r.finish()?;
    Ok(model)
}

pub fn write_checkpoint<W: Write>(model: &AdaptedClassifier, mut sink: W) -> Result<()> {
    sink.write_all(&checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<AdaptedClassifier> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf)
}
