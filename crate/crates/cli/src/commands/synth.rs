//! `gen-synthetic`: write a labelled synthetic event dataset.

use std::path::PathBuf;

use evadapt_core::events::{write_csv, write_stream};
use evadapt_core::synthetic::{gen_synthetic, SyntheticDatasetSpec};

use crate::config::Settings;
use crate::dataset::CLASSES_FILE;
use crate::error::{invalid, write, Result};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset root to create.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split directory the samples go into.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    /// Samples per class.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    width: Option<u16>,
    #[arg(long)]
    height: Option<u16>,
    /// Events per sample.
    #[arg(long)]
    events: Option<usize>,
    /// Fraction of uniformly placed noise events.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// evt1 or csv.
    #[arg(long)]
    format: Option<String>,
}

pub fn class_name(class: usize) -> String {
    format!("class{class:02}")
}

pub fn run(args: Args, cfg: &Settings) -> Result<()> {
    let d = SyntheticDatasetSpec::default();
    let spec = SyntheticDatasetSpec {
        num_classes: cfg.get(args.classes, "classes", d.num_classes)?,
        samples_per_class: cfg.get(args.per_class, "per_class", d.samples_per_class)?,
        width: cfg.get(args.width, "width", d.width)?,
        height: cfg.get(args.height, "height", d.height)?,
        events_per_sample: cfg.get(args.events, "events", d.events_per_sample)?,
        noise_fraction: cfg.get(args.noise, "noise", d.noise_fraction)?,
        seed: cfg.get(args.seed, "seed", d.seed)?,
    };
    let out: PathBuf = cfg.require(args.out, "out")?;
    let split: String = cfg.get(args.split, "split", "test".to_string())?;
    let format: String = cfg.get(args.format, "format", "evt1".to_string())?;
    if !matches!(format.as_str(), "evt1" | "csv") {
        return Err(invalid(format!(
            "unknown stream format {format:?} (expected evt1 or csv)"
        )));
    }
    let streams = gen_synthetic(&spec)?;
    let names: Vec<String> = (0..spec.num_classes).map(class_name).collect();
    write(&out.join(CLASSES_FILE), names.join("\n") + "\n")?;
    for s in &streams {
        let class = &names[s.label().expect("synthetic samples are labelled")];
        let path = out.join(&split).join(class).join(format!("{}.{format}", s.id()));
        let bytes = if format == "csv" {
            write_csv(s).into_bytes()
        } else {
            write_stream(s)
        };
        write(&path, bytes)?;
    }
    eprintln!(
        "wrote {} samples in {} classes to {}",
        streams.len(),
        names.len(),
        out.display()
    );
    Ok(())
}
