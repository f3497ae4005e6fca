//! `bench`: time single-threaded event-to-frame conversion.

use std::path::PathBuf;

use evadapt_core::bench::{time_convert, uniform_stream};
use serde::Serialize;

use crate::commands::{write_json, FrameArgs};
use crate::config::Settings;
use crate::error::{invalid, Result};

/// Median the reference implementation reports for the default workload.
pub const REFERENCE_MS: f64 = 6.76;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    width: Option<u16>,
    #[arg(long)]
    height: Option<u16>,
    /// Events in the benchmark stream.
    #[arg(long)]
    events: Option<usize>,
    /// Timed repetitions.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    frames: FrameArgs,
}

#[derive(Debug, Serialize)]
struct Report {
    events: usize,
    width: u16,
    height: u16,
    events_per_window: usize,
    frames: usize,
    runs: usize,
    median_ms: f64,
    p95_ms: f64,
    min_ms: f64,
    reference_ms: f64,
    os: &'static str,
    arch: &'static str,
    cpus: usize,
}

pub fn run(args: Args, cfg: &Settings) -> Result<()> {
    let width = cfg.get(args.width, "width", 640)?;
    let height = cfg.get(args.height, "height", 480)?;
    let events = cfg.get(args.events, "events", 70_000)?;
    let runs = cfg.get(args.runs, "runs", 100)?;
    let seed = cfg.get(args.seed, "seed", 0)?;
    let out = cfg.opt(args.out, "out")?;
    if events == 0 {
        return Err(invalid("--events must be >= 1"));
    }
    let windowing = args.frames.windowing(cfg, width, height)?;
    let map = args.frames.colormap(cfg)?;
    let stream = uniform_stream(events, width, height, seed)?;
    let r = time_convert(&stream, &windowing, map, runs)?;
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let report = Report {
        events: r.events,
        width,
        height,
        events_per_window: windowing.events_per_window,
        frames: r.frames,
        runs,
        median_ms: ms(r.median()),
        p95_ms: ms(r.percentile(0.95)),
        min_ms: ms(r.min()),
        reference_ms: REFERENCE_MS,
        os: std::env::consts::OS,
        arch: std::env::consts::ARCH,
        cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    write_json(out.as_deref(), &report)
}
