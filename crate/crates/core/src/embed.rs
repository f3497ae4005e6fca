//! Embedding sets, prompts and the synthetic encoder.
//!
//! Real image/text embeddings are produced outside this crate by a frozen
//! vision-language encoder and arrive as EMB1 files:
//!
//! ```text
//! "EMB1" | u32 version = 1 | u32 D | u32 R | f32 logit_scale | u8 normalized
//! R x (u16 len, UTF-8 id) | R x D f32 row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::{put_short_str, Reader};
use crate::events::EventStream;
use crate::frame::{convert, Colormap, EventFrame, NormalizedHistogram, WindowingConfig};
use crate::linalg::{l2_norm, Matrix};
use crate::synthetic::prototype_stream;
use crate::{Error, Result};

const EMB1_MAGIC: &[u8; 4] = b"EMB1";
const EMB1_VERSION: u32 = 1;

/// Used when an exporter leaves the scale unset (zero or negative).
pub const DEFAULT_LOGIT_SCALE: f32 = 100.0;

/// Rows further than this from unit norm are re-normalised on read.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

pub const DEFAULT_TEMPLATE: &str = "a point cloud image of a [CLASS]";

const PLACEHOLDER: &str = "[CLASS]";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    /// `ids.len() x dim`, row-major.
    pub vectors: Vec<f32>,
    pub ids: Vec<String>,
    /// Reciprocal of the softmax temperature.
    pub logit_scale: f32,
    pub normalized: bool,
}

impl EmbeddingSet {
    pub fn new(dim: usize, ids: Vec<String>, vectors: Vec<f32>, logit_scale: f32) -> Result<Self> {
        if vectors.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} ids x {dim} dims needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                vectors.len()
            )));
        }
        let normalized = vectors
            .chunks_exact(dim.max(1))
            .all(|r| (row_norm(r) - 1.0).abs() <= 1e-5);
        Ok(Self {
            dim,
            vectors,
            ids,
            logit_scale,
            normalized,
        })
    }

    /// Builds a set from `f64` rows, rounding to `f32`.
    pub fn from_matrix(ids: Vec<String>, m: &Matrix, logit_scale: f32) -> Result<Self> {
        if m.rows() != ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                m.rows()
            )));
        }
        let vectors = m.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(m.cols(), ids, vectors, logit_scale)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.vectors[r * self.dim..(r + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    /// All rows widened to `f64`.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.vectors.iter().map(|&v| v as f64).collect();
        Matrix::from_vec(self.len(), self.dim, data).expect("shape checked at construction")
    }

    /// Selected rows widened to `f64`.
    pub fn select(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend(self.row(r).iter().map(|&v| v as f64));
        }
        Matrix::from_vec(rows.len(), self.dim, data).expect("row lengths are dim")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(21 + self.vectors.len() * 4);
        out.extend_from_slice(EMB1_MAGIC);
        out.extend_from_slice(&EMB1_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_field(self.dim, "dimension")?.to_le_bytes());
        out.extend_from_slice(&u32_field(self.len(), "row count")?.to_le_bytes());
        out.extend_from_slice(&self.logit_scale.to_le_bytes());
        out.push(self.normalized as u8);
        for id in &self.ids {
            put_short_str(&mut out, id)?;
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "EMB1");
        r.magic(EMB1_MAGIC)?;
        let version = r.u32()?;
        if version != EMB1_VERSION {
            return Err(Error::MalformedHeader(format!("unsupported EMB1 version {version}")));
        }
        let dim = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let mut logit_scale = r.f32()?;
        let _flag = r.u8()?;
        if dim == 0 && rows > 0 {
            return Err(Error::DimensionMismatch("EMB1 dimension is zero".into()));
        }
        if !logit_scale.is_finite() {
            return Err(Error::MalformedHeader(format!(
                "logit_scale {logit_scale} is not finite"
            )));
        }
        if logit_scale <= 0.0 {
            logit_scale = DEFAULT_LOGIT_SCALE;
        }
        let ids = (0..rows).map(|_| r.short_str()).collect::<Result<Vec<_>>>()?;
        let expected = rows as u128 * dim as u128 * 4;
        if r.remaining() as u128 != expected {
            return Err(Error::DimensionMismatch(format!(
                "EMB1 header says {rows}x{dim} ({expected} bytes) but {} bytes follow",
                r.remaining()
            )));
        }
        let mut vectors = Vec::with_capacity(rows * dim);
        for _ in 0..rows * dim {
            vectors.push(r.f32()?);
        }
        for (row, chunk) in vectors.chunks_exact_mut(dim.max(1)).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row });
            }
            let norm = row_norm(chunk);
            if norm == 0.0 {
                return Err(Error::InvalidArgument(format!("row {row} has zero norm")));
            }
            if (norm - 1.0).abs() > RENORMALIZE_TOLERANCE {
                for v in chunk.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        Ok(Self {
            dim,
            vectors,
            ids,
            logit_scale,
            normalized: true,
        })
    }
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

pub fn write_embeddings<W: Write>(set: &EmbeddingSet, mut sink: W) -> Result<()> {
    sink.write_all(&set.to_bytes()?)?;
    Ok(())
}

pub fn read_embeddings<R: Read>(mut source: R) -> Result<EmbeddingSet> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    EmbeddingSet::from_bytes(&buf)
}

/// A prompt with exactly one `[CLASS]` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        match template.matches(PLACEHOLDER).count() {
            1 => Ok(Self(template)),
            n => Err(Error::InvalidArgument(format!(
                "template {template:?} must contain exactly one {PLACEHOLDER}, found {n}"
            ))),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn fill(&self, class: &str) -> String {
        self.0.replace(PLACEHOLDER, class)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATE.to_string())
    }
}

/// Regroup per-frame rows (ids `<sample>/<frame index>`) into one feature
/// matrix per sample. Samples keep first-appearance order and frames are
/// sorted by index. An id without a `/` is a single-frame sample.
pub fn group_by_sample(set: &EmbeddingSet) -> Result<Vec<(String, Matrix)>> {
    let mut order: Vec<String> = Vec::new();
    let mut frames: HashMap<String, Vec<(u64, usize)>> = HashMap::new();
    for (row, id) in set.ids.iter().enumerate() {
        let (sample, index) = match id.rsplit_once('/') {
            Some((s, i)) => {
                let i = i
                    .parse::<u64>()
                    .map_err(|_| Error::InvalidArgument(format!("frame id {id:?} does not end in /<index>")))?;
                (s, i)
            }
            None => (id.as_str(), 0),
        };
        let entry = frames.entry(sample.to_string()).or_insert_with(|| {
            order.push(sample.to_string());
            Vec::new()
        });
        if entry.iter().any(|&(i, _)| i == index) {
            return Err(Error::InvalidArgument(format!("duplicate frame id {id:?}")));
        }
        entry.push((index, row));
    }
    Ok(order
        .into_iter()
        .map(|sample| {
            let mut rows = frames.remove(&sample).unwrap_or_default();
            rows.sort_unstable();
            let idx: Vec<usize> = rows.into_iter().map(|(_, r)| r).collect();
            (sample, set.select(&idx))
        })
        .collect())
}

pub fn build_prompts<S: AsRef<str>>(classes: &[S], tpl: &PromptTemplate) -> Result<Vec<String>> {
    if classes.is_empty() {
        return Err(Error::Empty("class list".into()));
    }
    Ok(classes.iter().map(|c| tpl.fill(c.as_ref())).collect())
}

/// Side of the grid frames are pooled to before projection.
pub const SYNTHETIC_GRID: usize = 16;

/// A seeded linear encoder: pool a frame's normalised intensity to a 16x16
/// grid by area averaging, project with a fixed random `256 x D` matrix and
/// L2-normalise.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    dim: usize,
    seed: u64,
    /// `256 x dim`
    projection: Matrix,
}

impl SyntheticEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::InvalidArgument(format!(
                "synthetic encoder needs dim >= 8, got {dim}"
            )));
        }
        let cells = SYNTHETIC_GRID * SYNTHETIC_GRID;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 3f64.sqrt();
        let data = (0..cells * dim).map(|_| rng.random_range(-a..a)).collect();
        Ok(Self {
            dim,
            seed,
            projection: Matrix::from_vec(cells, dim, data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode_normalized(&self, hist: &NormalizedHistogram) -> Vec<f64> {
        let pooled = area_pool(&hist.intensity(), hist.width, hist.height, SYNTHETIC_GRID);
        let mut out = vec![0.0; self.dim];
        for (k, &v) in pooled.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.projection.row(k)) {
                *o += v * p;
            }
        }
        let norm = l2_norm(&out);
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        } else {
            // Only an all-empty frame lands here.
            out[0] = 1.0;
        }
        out
    }

    pub fn encode(&self, frame: &EventFrame) -> Vec<f64> {
        self.encode_normalized(&frame.normalized)
    }

    /// One row per window of the converted stream.
    pub fn encode_stream(&self, stream: &EventStream, cfg: &WindowingConfig, map: Colormap) -> Matrix {
        let rows: Vec<Vec<f64>> = convert(stream, cfg, map).iter().map(|f| self.encode(f)).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, self.dim);
        }
        Matrix::from_rows(&rows).expect("encoder rows share one length")
    }

    /// Text-side stand-in: the encoding of the class's noise-free prototype.
    pub fn encode_class(&self, class: usize, num_classes: usize, width: u16, height: u16) -> Result<Vec<f64>> {
        let proto = prototype_stream(class, num_classes, width, height)?;
        let frame = EventFrame::from_window(proto.events(), width as usize, height as usize, Colormap::Gray);
        Ok(self.encode(&frame))
    }

    /// All class embeddings, ids taken from `class_names`.
    pub fn text_embeddings(
        &self,
        class_names: &[String],
        width: u16,
        height: u16,
        logit_scale: f32,
    ) -> Result<EmbeddingSet> {
        let k = class_names.len();
        let rows = (0..k)
            .map(|c| self.encode_class(c, k, width, height))
            .collect::<Result<Vec<_>>>()?;
        EmbeddingSet::from_matrix(class_names.to_vec(), &Matrix::from_rows(&rows)?, logit_scale)
    }
}

/// Free-function form of [`SyntheticEncoder::encode`].
pub fn synthetic_encode(frame: &EventFrame, dim: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(SyntheticEncoder::new(dim, seed)?.encode(frame))
}

/// Free-function form of [`SyntheticEncoder::encode_class`].
pub fn synthetic_text_encode(
    class_index: usize,
    num_classes: usize,
    dim: usize,
    seed: u64,
    width: u16,
    height: u16,
) -> Result<Vec<f64>> {
    SyntheticEncoder::new(dim, seed)?.encode_class(class_index, num_classes, width, height)
}

/// For each output cell along an axis: the source indices it overlaps and
/// the overlap as a fraction of the cell.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let cell = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let lo = j as f64 * cell;
            let hi = lo + cell;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / cell))
                })
                .collect()
        })
        .collect()
}

/// Area-average a `width x height` grid down to `side x side`.
pub fn area_pool(values: &[f64], width: usize, height: usize, side: usize) -> Vec<f64> {
    let wx = axis_weights(width, side);
    let wy = axis_weights(height, side);
    let mut out = vec![0.0; side * side];
    for (oy, ys) in wy.iter().enumerate() {
        for (ox, xs) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, fy) in ys {
                let row = &values[y * width..(y + 1) * width];
                for &(x, fx) in xs {
                    acc += fy * fx * row[x];
                }
            }
            out[oy * side + ox] = acc;
        }
    }
    out
}
