//! `convert`: turn an event dataset into frames and a manifest.

use std::path::PathBuf;

use evadapt_core::frame::{convert, resize_center_crop, write_frm1, RgbImage};

use crate::commands::FrameArgs;
use crate::config::Settings;
use crate::dataset::{discover, load_stream, manifest_text, LabelRef, ManifestRow, MANIFEST_FILE};
use crate::error::{create_dir, invalid, write, CliError, Result};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset root (`<split>/<class>/<id>.evt1`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only convert this split.
    #[arg(long)]
    split: Option<String>,
    /// png (one file per frame) or frm1 (one file per sample).
    #[arg(long)]
    format: Option<String>,
    /// Resize and centre-crop frames to this square side.
    #[arg(long)]
    resize: Option<usize>,
    #[command(flatten)]
    frames: FrameArgs,
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    img.write_png(&mut buf)?;
    Ok(buf)
}

pub fn run(args: Args, cfg: &Settings) -> Result<()> {
    let data: PathBuf = cfg.require(args.data, "data")?;
    let out: PathBuf = cfg.require(args.out, "out")?;
    let split = cfg.opt(args.split, "split")?;
    let format: String = cfg.get(args.format, "format", "png".to_string())?;
    if !matches!(format.as_str(), "png" | "frm1") {
        return Err(invalid(format!(
            "unknown frame format {format:?} (expected png or frm1)"
        )));
    }
    let resize = cfg.opt(args.resize, "resize")?;
    let map = args.frames.colormap(cfg)?;
    let dataset = discover(&data, split.as_deref())?;
    create_dir(&out)?;
    let mut rows = Vec::with_capacity(dataset.entries.len());
    for entry in &dataset.entries {
        let stream = load_stream(entry)?;
        let windowing = args.frames.windowing(cfg, stream.width(), stream.height())?;
        let images = convert(&stream, &windowing, map)
            .into_iter()
            .map(|f| match resize {
                Some(side) => resize_center_crop(&f.rgb, side).map_err(CliError::from),
                None => Ok(f.rgb),
            })
            .collect::<Result<Vec<_>>>()?;
        let class_dir = entry.class.as_deref().unwrap_or("_unlabeled");
        let rel_dir = PathBuf::from(&entry.split).join(class_dir);
        let mut frames = Vec::new();
        if format == "png" {
            for (i, img) in images.iter().enumerate() {
                let rel = rel_dir.join(&entry.id).join(format!("frame_{i:04}.png"));
                write(&out.join(&rel), png_bytes(img)?)?;
                frames.push(rel.to_string_lossy().into_owned());
            }
        } else {
            let rel = rel_dir.join(format!("{}.frm1", entry.id));
            write(&out.join(&rel), write_frm1(&images)?)?;
            frames.push(rel.to_string_lossy().into_owned());
        }
        rows.push(ManifestRow {
            id: entry.id.clone(),
            split: Some(entry.split.clone()),
            class: entry.class.clone(),
            label: entry.label.map(LabelRef::Index),
            windows: Some(images.len()),
            events_per_window: Some(windowing.events_per_window),
            frames,
        });
    }
    write(&out.join(MANIFEST_FILE), manifest_text(&rows))?;
    eprintln!("converted {} samples into {}", rows.len(), out.display());
    Ok(())
}
