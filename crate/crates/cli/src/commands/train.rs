//! `train`: fit an adapter on few-shot samples from an embedding bundle.

use std::path::{Path, PathBuf};

use evadapt_core::adapter::{checkpoint_bytes, AdaptedClassifier};
use evadapt_core::train::{
    accuracy, continue_training, init_model, sample_few_shot, write_loss_curve, AdapterKind, CurvePoint, TrainConfig,
    TrainSample,
};
use serde::Serialize;

use crate::commands::write_json;
use crate::config::Settings;
use crate::dataset::load_bundle;
use crate::error::{invalid, write, Result};

pub const DEFAULT_SHOTS: usize = 5;
pub const CHECKPOINT_FILE: &str = "checkpoint.adp1";
pub const CURVE_FILE: &str = "loss_curve.csv";

/// Optimiser and architecture flags shared by `train` and `pseudolabel`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate of the visual adapter.
    #[arg(long)]
    pub lr_visual: Option<f64>,
    /// Peak learning rate of the text weights.
    #[arg(long)]
    pub lr_text: Option<f64>,
    /// Warmup fraction of the schedule.
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Residual ratio of the visual adapter.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub token_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Windows the MLP adapter concatenates.
    #[arg(long)]
    pub mlp_max_windows: Option<usize>,
}

impl TrainArgs {
    pub fn config(&self, kind: AdapterKind, cfg: &Settings) -> Result<TrainConfig> {
        let d = TrainConfig::for_kind(kind);
        let mut t = d.transformer;
        t.token_dim = cfg.get(self.token_dim, "token_dim", t.token_dim)?;
        t.heads = cfg.get(self.heads, "heads", t.heads)?;
        t.mlp_dim = cfg.get(self.mlp_dim, "mlp_dim", t.mlp_dim)?;
        t.blocks = cfg.get(self.blocks, "blocks", t.blocks)?;
        let out = TrainConfig {
            epochs: cfg.get(self.epochs, "epochs", d.epochs)?,
            batch_size: cfg.get(self.batch_size, "batch_size", d.batch_size)?,
            peak_lr_visual: cfg.get(self.lr_visual, "lr_visual", d.peak_lr_visual)?,
            peak_lr_text: cfg.get(self.lr_text, "lr_text", d.peak_lr_text)?,
            warmup_fraction: cfg.get(self.warmup, "warmup", d.warmup_fraction)?,
            alpha: cfg.get(self.alpha, "alpha", d.alpha)?,
            seed: cfg.get(self.seed, "seed", d.seed)?,
            transformer: t,
            mlp_max_windows: cfg.get(self.mlp_max_windows, "mlp_max_windows", d.mlp_max_windows)?,
        };
        out.validate()?;
        Ok(out)
    }
}

pub fn write_outputs(dir: &Path, model: &AdaptedClassifier, curve: &[CurvePoint]) -> Result<()> {
    write(&dir.join(CHECKPOINT_FILE), checkpoint_bytes(model)?)?;
    let mut buf = Vec::new();
    write_loss_curve(curve, &mut buf)?;
    write(&dir.join(CURVE_FILE), buf)
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Directory with image.emb1, text.emb1 and manifest.jsonl.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// visual_transformer, visual_mlp, text or joint.
    #[arg(long)]
    kind: Option<AdapterKind>,
    /// Labelled samples per class used for training; the rest are held out.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    kind: String,
    shots: usize,
    train_samples: usize,
    held_out_samples: usize,
    steps: usize,
    final_loss: Option<f64>,
    parameters: usize,
    held_out_zero_shot: Option<f64>,
    held_out_adapted: Option<f64>,
    warnings: Vec<String>,
}

pub fn run(args: Args, cfg: &Settings) -> Result<()> {
    let dir: PathBuf = cfg.require(args.embeddings, "embeddings")?;
    let out: PathBuf = cfg.require(args.out, "out")?;
    let kind = cfg.get(args.kind, "kind", AdapterKind::Joint)?;
    let shots = cfg.get(args.shots, "shots", DEFAULT_SHOTS)?;
    if shots == 0 {
        return Err(invalid("--shots must be >= 1"));
    }
    let split = cfg.opt(args.split, "split")?;
    let tcfg = args.train.config(kind, cfg)?;
    let bundle = load_bundle(&dir, split.as_deref())?;
    let labelled: Vec<TrainSample> = bundle
        .labelled()
        .map(|(s, label)| TrainSample {
            id: s.id.clone(),
            features: s.features.clone(),
            label,
        })
        .collect();
    if labelled.is_empty() {
        return Err(invalid("no labelled samples to train on"));
    }
    let labels: Vec<usize> = labelled.iter().map(|s| s.label).collect();
    let fs = sample_few_shot(&labels, shots, tcfg.seed)?;
    for w in &fs.warnings {
        eprintln!("warning: {w}");
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| labelled[i].clone()).collect::<Vec<_>>();
    let (train, held_out) = (pick(&fs.train), pick(&fs.held_out));
    let init = init_model(kind, &bundle.text, bundle.logit_scale, &tcfg)?;
    let zero_shot = AdaptedClassifier::zero_shot(bundle.text.clone(), bundle.logit_scale)?;
    let outcome = continue_training(init, &train, kind, &tcfg)?;
    write_outputs(&out, &outcome.model, &outcome.curve)?;
    let held = |m: &AdaptedClassifier| -> Result<Option<f64>> {
        if held_out.is_empty() {
            Ok(None)
        } else {
            Ok(Some(accuracy(m, &held_out)?))
        }
    };
    let report = TrainReport {
        kind: kind.to_string(),
        shots,
        train_samples: train.len(),
        held_out_samples: held_out.len(),
        steps: outcome.curve.len(),
        final_loss: outcome.curve.last().map(|p| p.loss),
        parameters: outcome.model.num_parameters(),
        held_out_zero_shot: held(&zero_shot)?,
        held_out_adapted: held(&outcome.model)?,
        warnings: fs.warnings,
    };
    if let (Some(z), Some(a)) = (report.held_out_zero_shot, report.held_out_adapted) {
        eprintln!("held-out top-1: zero-shot {:.2}%, adapted {:.2}%", 100.0 * z, 100.0 * a);
    }
    write_json(Some(&out.join("train_report.json")), &report)
}
