//! `embed-synthetic`: embed an event dataset with the seeded synthetic
//! encoder, producing the same bundle a real encoder export would.

use std::path::PathBuf;

use evadapt_core::embed::{EmbeddingSet, SyntheticEncoder, DEFAULT_LOGIT_SCALE};
use evadapt_core::events::EventStream;
use evadapt_core::linalg::Matrix;

use crate::commands::FrameArgs;
use crate::config::Settings;
use crate::dataset::{
    discover, load_stream, manifest_text, Dataset, LabelRef, ManifestRow, IMAGE_FILE, MANIFEST_FILE, TEXT_FILE,
};
use crate::error::{invalid, write, Result};

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, clap::Args)]
pub struct EncoderArgs {
    /// Embedding width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Seed of the random projection.
    #[arg(long)]
    pub encoder_seed: Option<u64>,
    #[arg(long)]
    pub logit_scale: Option<f32>,
}

impl EncoderArgs {
    pub fn encoder(&self, cfg: &Settings) -> Result<SyntheticEncoder> {
        let dim = cfg.get(self.dim, "dim", DEFAULT_DIM)?;
        let seed = cfg.get(self.encoder_seed, "encoder_seed", 0)?;
        Ok(SyntheticEncoder::new(dim, seed)?)
    }

    pub fn logit_scale(&self, cfg: &Settings) -> Result<f32> {
        let s = cfg.get(self.logit_scale, "logit_scale", DEFAULT_LOGIT_SCALE)?;
        if !(s.is_finite() && s > 0.0) {
            return Err(invalid(format!("logit scale {s} must be positive")));
        }
        Ok(s)
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for image.emb1, text.emb1 and manifest.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    frames: FrameArgs,
}

/// Every stream of the dataset, checked to share one sensor size.
pub fn load_all(dataset: &Dataset) -> Result<(Vec<EventStream>, u16, u16)> {
    let streams = dataset.entries.iter().map(load_stream).collect::<Result<Vec<_>>>()?;
    let Some(first) = streams.first() else {
        return Err(invalid("dataset contains no event streams"));
    };
    let (w, h) = (first.width(), first.height());
    if let Some(s) = streams.iter().find(|s| (s.width(), s.height()) != (w, h)) {
        return Err(invalid(format!(
            "sample {:?} is {}x{}, expected {w}x{h} like {:?}",
            s.id(),
            s.width(),
            s.height(),
            first.id()
        )));
    }
    Ok((streams, w, h))
}

pub fn run(args: Args, cfg: &Settings) -> Result<()> {
    let data: PathBuf = cfg.require(args.data, "data")?;
    let out: PathBuf = cfg.require(args.out, "out")?;
    let split = cfg.opt(args.split, "split")?;
    let encoder = args.encoder.encoder(cfg)?;
    let scale = args.encoder.logit_scale(cfg)?;
    let map = args.frames.colormap(cfg)?;
    let dataset = discover(&data, split.as_deref())?;
    if dataset.classes.len() < 2 {
        return Err(invalid(format!(
            "need at least 2 classes, found {}",
            dataset.classes.len()
        )));
    }
    let (streams, w, h) = load_all(&dataset)?;
    let windowing = args.frames.windowing(cfg, w, h)?;

    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    let mut rows = Vec::with_capacity(streams.len());
    for (entry, stream) in dataset.entries.iter().zip(&streams) {
        let features: Matrix = encoder.encode_stream(stream, &windowing, map);
        for (i, row) in features.iter_rows().enumerate() {
            ids.push(format!("{}/{i}", entry.id));
            vectors.extend(row.iter().map(|&v| v as f32));
        }
        rows.push(ManifestRow {
            id: entry.id.clone(),
            split: Some(entry.split.clone()),
            class: entry.class.clone(),
            label: entry.label.map(LabelRef::Index),
            windows: Some(features.rows()),
            events_per_window: Some(windowing.events_per_window),
            frames: Vec::new(),
        });
    }
    let images = EmbeddingSet::new(encoder.dim(), ids, vectors, scale)?;
    let text = encoder.text_embeddings(&dataset.classes, w, h, scale)?;
    write(&out.join(IMAGE_FILE), images.to_bytes()?)?;
    write(&out.join(TEXT_FILE), text.to_bytes()?)?;
    write(&out.join(MANIFEST_FILE), manifest_text(&rows))?;
    eprintln!(
        "embedded {} samples ({} frames, {}-d) into {}",
        rows.len(),
        images.len(),
        encoder.dim(),
        out.display()
    );
    Ok(())
}
