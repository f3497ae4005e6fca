//! `pseudolabel`: augmentation-consistent pseudo-labelling and one round of
//! self-training on an event dataset, embedded with the synthetic encoder.

use std::path::PathBuf;

use evadapt_core::pseudo::{
    augment_and_encode, self_train, write_report_csv, PseudoLabelConfig, SelfTrainReport,
    DEFAULT_THRESHOLD_SEMI_SUPERVISED, DEFAULT_THRESHOLD_UNSUPERVISED, DEFAULT_TOP_K,
};
use evadapt_core::train::{sample_few_shot, AdapterKind, TrainSample};
use serde::Serialize;

use crate::commands::embed::{load_all, EncoderArgs};
use crate::commands::train::{write_outputs, TrainArgs, DEFAULT_SHOTS};
use crate::commands::{write_json, FrameArgs};
use crate::config::Settings;
use crate::dataset::discover;
use crate::error::{invalid, write, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Zero-shot labels the pool; no ground truth is used for training.
    Unsupervised,
    /// An adapter trained on labelled shots labels the pool.
    Semi,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unsupervised" => Ok(Mode::Unsupervised),
            "semi" | "semi_supervised" | "semi-supervised" => Ok(Mode::Semi),
            other => Err(format!("unknown mode {other:?} (expected unsupervised or semi)")),
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset root (`<split>/<class>/<id>.evt1`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Minimum confidence every view must reach.
    #[arg(long)]
    conf_threshold: Option<f64>,
    /// Accepted samples kept per class.
    #[arg(long)]
    top_k: Option<usize>,
    /// Labelled shots per class in semi mode.
    #[arg(long)]
    shots: Option<usize>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    frames: FrameArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Serialize)]
struct Report {
    mode: &'static str,
    conf_threshold: f64,
    top_k: usize,
    labelled_shots: usize,
    candidates: usize,
    accepted: usize,
    inconsistent: usize,
    low_confidence: usize,
    crowded_out: usize,
    acceptance_rate: f64,
    per_class: Vec<usize>,
    purity: Option<f64>,
    unfiltered_purity: Option<f64>,
    steps: usize,
}

pub fn run(args: Args, cfg: &Settings) -> Result<()> {
    let data: PathBuf = cfg.require(args.data, "data")?;
    let out: PathBuf = cfg.require(args.out, "out")?;
    let split = cfg.opt(args.split, "split")?;
    let mode = cfg.get(args.mode, "mode", Mode::Unsupervised)?;
    let default_threshold = match mode {
        Mode::Unsupervised => DEFAULT_THRESHOLD_UNSUPERVISED,
        Mode::Semi => DEFAULT_THRESHOLD_SEMI_SUPERVISED,
    };
    let pcfg = PseudoLabelConfig::new(
        cfg.get(args.conf_threshold, "conf_threshold", default_threshold)?,
        cfg.get(args.top_k, "top_k", DEFAULT_TOP_K)?,
    )?;
    let tcfg = args.train.config(AdapterKind::Joint, cfg)?;
    let encoder = args.encoder.encoder(cfg)?;
    let scale = args.encoder.logit_scale(cfg)?;
    let map = args.frames.colormap(cfg)?;

    let dataset = discover(&data, split.as_deref())?;
    if dataset.classes.len() < 2 {
        return Err(invalid(format!(
            "need at least 2 classes (class directories or classes.txt), found {}",
            dataset.classes.len()
        )));
    }
    let (streams, w, h) = load_all(&dataset)?;
    let windowing = args.frames.windowing(cfg, w, h)?;
    let text = encoder.text_embeddings(&dataset.classes, w, h, scale)?.to_matrix();

    // Semi mode draws its shots from the labelled streams; everything else
    // forms the unlabelled pool. Pool labels only feed the purity report.
    let mut shot_idx = Vec::new();
    if mode == Mode::Semi {
        let shots = cfg.get(args.shots, "shots", DEFAULT_SHOTS)?;
        let labelled: Vec<usize> = (0..streams.len()).filter(|&i| streams[i].label().is_some()).collect();
        if labelled.is_empty() {
            return Err(invalid("semi mode needs labelled streams for its shots"));
        }
        let labels: Vec<usize> = labelled.iter().map(|&i| streams[i].label().unwrap_or(0)).collect();
        let fs = sample_few_shot(&labels, shots, tcfg.seed)?;
        for w in &fs.warnings {
            eprintln!("warning: {w}");
        }
        shot_idx = fs.train.iter().map(|&j| labelled[j]).collect();
    }
    let mut shots = Vec::with_capacity(shot_idx.len());
    let mut pool = Vec::with_capacity(streams.len());
    for (i, s) in streams.iter().enumerate() {
        if shot_idx.contains(&i) {
            let features = encoder.encode_stream(s, &windowing, map);
            let label = s.label().expect("shots are labelled");
            shots.push(TrainSample {
                id: s.id().to_string(),
                features,
                label,
            });
        } else {
            pool.push(augment_and_encode(s, &encoder, &windowing, map)?);
        }
    }
    let labeled = (mode == Mode::Semi).then_some(shots.as_slice());
    let outcome = self_train(&pool, labeled, &text, f64::from(scale), &pcfg, &tcfg)?;

    let mut csv = Vec::new();
    write_report_csv(&outcome.records, &mut csv)?;
    write(&out.join("pseudo_labels.csv"), csv)?;
    write_outputs(&out, &outcome.model, &outcome.curve)?;
    let SelfTrainReport {
        candidates,
        accepted,
        inconsistent,
        low_confidence,
        crowded_out,
        acceptance_rate,
        per_class,
        purity,
        unfiltered_purity,
    } = outcome.report;
    eprintln!("accepted {accepted} of {candidates} candidates");
    let report = Report {
        mode: match mode {
            Mode::Unsupervised => "unsupervised",
            Mode::Semi => "semi",
        },
        conf_threshold: pcfg.conf_threshold,
        top_k: pcfg.top_k,
        labelled_shots: shots.len(),
        candidates,
        accepted,
        inconsistent,
        low_confidence,
        crowded_out,
        acceptance_rate,
        per_class,
        purity,
        unfiltered_purity,
        steps: outcome.curve.len(),
    };
    write_json(Some(&out.join("pseudo_report.json")), &report)
}
