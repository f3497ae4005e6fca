//! `eval` and `ensemble-grid`: score a bundle of embeddings.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use evadapt_core::adapter::AdaptedClassifier;
use evadapt_core::zeroshot::{ensemble, ClassProbabilities, EnsembleConfig, ExternalLogits};
use serde::Serialize;

use crate::commands::{load_checkpoint, write_csv, write_json};
use crate::config::{parse_list, Settings};
use crate::dataset::{load_bundle, Bundle};
use crate::error::{invalid, read, AtPath, Result};

pub const DEFAULT_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, clap::Args)]
pub struct ModelArgs {
    /// Directory with image.emb1, text.emb1 and manifest.jsonl.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Adapter checkpoint; zero-shot when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Only use manifest rows of this split.
    #[arg(long)]
    split: Option<String>,
}

struct Loaded {
    bundle: Bundle,
    model: AdaptedClassifier,
    name: String,
}

fn load(args: ModelArgs, cfg: &Settings) -> Result<Loaded> {
    let dir: PathBuf = cfg.require(args.embeddings, "embeddings")?;
    let split = cfg.opt(args.split, "split")?;
    let bundle = load_bundle(&dir, split.as_deref())?;
    let (model, name) = match cfg.opt(args.checkpoint, "checkpoint")? {
        Some(path) => {
            let model = load_checkpoint(&path)?;
            if (model.num_classes(), model.dim()) != (bundle.text.rows(), bundle.text.cols()) {
                return Err(invalid(format!(
                    "checkpoint {} is for {} classes in {} dims, the embeddings have {} in {}",
                    path.display(),
                    model.num_classes(),
                    model.dim(),
                    bundle.text.rows(),
                    bundle.text.cols()
                )));
            }
            (model, "adapter".to_string())
        }
        None => (
            AdaptedClassifier::zero_shot(bundle.text.clone(), bundle.logit_scale)?,
            "zero-shot".to_string(),
        ),
    };
    Ok(Loaded { bundle, model, name })
}

fn load_external(path: &Path, num_classes: usize) -> Result<ExternalLogits> {
    let ext = ExternalLogits::from_bytes(&read(path)?).at(path)?;
    if ext.num_classes != num_classes {
        return Err(invalid(format!(
            "{} has logits for {} classes, the embeddings have {num_classes}",
            path.display(),
            ext.num_classes
        )));
    }
    Ok(ext)
}

/// External logits for each sample, in bundle order.
fn external_rows(ext: &ExternalLogits, bundle: &Bundle) -> Result<Vec<Vec<f64>>> {
    let index: HashMap<&str, usize> = ext.index();
    bundle
        .samples
        .iter()
        .map(|s| {
            let r = index
                .get(s.id.as_str())
                .ok_or_else(|| invalid(format!("no external logits for id {:?}", s.id)))?;
            Ok(ext.row(*r).iter().map(|&v| f64::from(v)).collect())
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct ClassScore {
    class: String,
    samples: usize,
    correct: usize,
    accuracy: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Prediction {
    id: String,
    predicted: String,
    confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    samples: usize,
    labelled: usize,
    correct: usize,
    top1: Option<f64>,
    per_class: Vec<ClassScore>,
    predictions: Vec<Prediction>,
}

fn ratio(hit: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hit as f64 / n as f64)
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// External classifier logits (LGT1) to ensemble with.
    #[arg(long)]
    external: Option<PathBuf>,
    /// Weight on the external logits.
    #[arg(long)]
    lambda: Option<f64>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run_eval(args: EvalArgs, cfg: &Settings) -> Result<()> {
    let out = cfg.opt(args.out, "out")?;
    let external = cfg.opt(args.external, "external")?;
    let lambda = cfg.opt(args.lambda, "lambda")?;
    if lambda.is_some() && external.is_none() {
        return Err(invalid("--lambda needs --external"));
    }
    let Loaded { bundle, model, name } = load(args.model, cfg)?;
    let k = bundle.classes.len();
    let mut probs: Vec<ClassProbabilities> = bundle
        .samples
        .iter()
        .map(|s| model.predict(&s.features))
        .collect::<evadapt_core::Result<_>>()?;
    let mut lambda_used = None;
    if let Some(path) = external {
        let ens = EnsembleConfig::new(lambda.unwrap_or(EnsembleConfig::default().lambda()))?;
        let rows = external_rows(&load_external(&path, k)?, &bundle)?;
        probs = probs
            .iter()
            .zip(&rows)
            .map(|(p, e)| Ok(ensemble(&p.log_probs(), e, &ens)?.1))
            .collect::<Result<_>>()?;
        lambda_used = Some(ens.lambda());
    }
    let mut per_class: Vec<ClassScore> = bundle
        .classes
        .iter()
        .map(|c| ClassScore {
            class: c.clone(),
            samples: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    let mut predictions = Vec::with_capacity(probs.len());
    for (s, p) in bundle.samples.iter().zip(&probs) {
        let pred = p.argmax();
        if let Some(l) = s.label {
            per_class[l].samples += 1;
            per_class[l].correct += usize::from(pred == l);
        }
        predictions.push(Prediction {
            id: s.id.clone(),
            predicted: bundle.classes[pred].clone(),
            confidence: p.max(),
            label: s.label.map(|l| bundle.classes[l].clone()),
        });
    }
    for c in &mut per_class {
        c.accuracy = ratio(c.correct, c.samples);
    }
    let labelled: usize = per_class.iter().map(|c| c.samples).sum();
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    let report = EvalReport {
        model: name,
        lambda: lambda_used,
        samples: bundle.samples.len(),
        labelled,
        correct,
        top1: ratio(correct, labelled),
        per_class,
        predictions,
    };
    if let Some(t) = report.top1 {
        eprintln!("top-1 {:.2}% on {labelled} labelled samples", 100.0 * t);
    }
    write_json(out.as_deref(), &report)
}

#[derive(Debug, clap::Args)]
pub struct GridArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// External classifier logits (LGT1).
    #[arg(long)]
    external: Option<PathBuf>,
    /// Comma-separated lambda values.
    #[arg(long)]
    grid: Option<String>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run_grid(args: GridArgs, cfg: &Settings) -> Result<()> {
    let out = cfg.opt(args.out, "out")?;
    let external: PathBuf = cfg.require(args.external, "external")?;
    let grid = match cfg.opt(args.grid, "grid")? {
        Some(s) => parse_list::<f64>(&s)?,
        None => DEFAULT_GRID.to_vec(),
    };
    if grid.is_empty() {
        return Err(invalid("empty lambda grid"));
    }
    let configs = grid
        .iter()
        .map(|&l| EnsembleConfig::new(l))
        .collect::<evadapt_core::Result<Vec<_>>>()?;
    let Loaded { bundle, model, .. } = load(args.model, cfg)?;
    let rows = external_rows(&load_external(&external, bundle.classes.len())?, &bundle)?;
    let mut ours = Vec::new();
    let mut ext = Vec::new();
    let mut labels = Vec::new();
    for (s, e) in bundle.samples.iter().zip(&rows) {
        if let Some(l) = s.label {
            ours.push(model.predict(&s.features)?.log_probs());
            ext.push(e);
            labels.push(l);
        }
    }
    if labels.is_empty() {
        return Err(invalid("ensemble grid needs labelled samples"));
    }
    let mut csv = String::from("lambda,top1\n");
    for c in &configs {
        let mut hit = 0usize;
        for ((o, e), &l) in ours.iter().zip(&ext).zip(&labels) {
            hit += usize::from(ensemble(o, e, c)?.0 == l);
        }
        csv.push_str(&format!("{},{:.6}\n", c.lambda(), hit as f64 / labels.len() as f64));
    }
    write_csv(out.as_deref(), &csv)
}
