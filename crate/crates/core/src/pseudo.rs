//! Pseudo-labels from augmentation consistency, and self-training on them.
//!
//! Every unlabelled stream is classified under four augmentations. A label
//! is accepted only when all four predictions agree and every one of them is
//! at least `conf_threshold` confident. Accepted samples are then balanced
//! to at most `top_k` per class by mean confidence.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use crate::adapter::AdaptedClassifier;
use crate::embed::SyntheticEncoder;
use crate::events::{hflip, treverse, EventStream};
use crate::frame::{Colormap, WindowingConfig};
use crate::linalg::Matrix;
use crate::train::{continue_training, train_adapter, AdapterKind, CurvePoint, TrainConfig, TrainSample};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD_UNSUPERVISED: f64 = 0.999;
pub const DEFAULT_THRESHOLD_SEMI_SUPERVISED: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Augmentation {
    Identity,
    HFlip,
    TReverse,
    HFlipTReverse,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] = [
        Augmentation::Identity,
        Augmentation::HFlip,
        Augmentation::TReverse,
        Augmentation::HFlipTReverse,
    ];

    pub fn apply(self, stream: &EventStream) -> EventStream {
        match self {
            Augmentation::Identity => stream.clone(),
            Augmentation::HFlip => hflip(stream),
            Augmentation::TReverse => treverse(stream),
            Augmentation::HFlipTReverse => treverse(&hflip(stream)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Augmentation::Identity => "identity",
            Augmentation::HFlip => "hflip",
            Augmentation::TReverse => "treverse",
            Augmentation::HFlipTReverse => "hflip+treverse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelConfig {
    pub conf_threshold: f64,
    pub top_k: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self::unsupervised()
    }
}

impl PseudoLabelConfig {
    pub fn new(conf_threshold: f64, top_k: usize) -> Result<Self> {
        if !(conf_threshold > 0.0 && conf_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "confidence threshold {conf_threshold} outside (0, 1)"
            )));
        }
        if top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be >= 1".into()));
        }
        Ok(Self { conf_threshold, top_k })
    }

    pub fn unsupervised() -> Self {
        Self {
            conf_threshold: DEFAULT_THRESHOLD_UNSUPERVISED,
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn semi_supervised() -> Self {
        Self {
            conf_threshold: DEFAULT_THRESHOLD_SEMI_SUPERVISED,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    Inconsistent,
    LowConfidence,
    CrowdedOut,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Inconsistent => "inconsistent",
            RejectReason::LowConfidence => "low_confidence",
            RejectReason::CrowdedOut => "crowded_out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Accepted { label: usize, mean_confidence: f64 },
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted { .. })
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accepted { .. } => f.write_str("accepted"),
            Verdict::Rejected(_) => f.write_str("rejected"),
        }
    }
}

/// Per-augmentation `(argmax, max probability)` in [`Augmentation::ALL`]
/// order.
pub type ViewPredictions = [(usize, f64); 4];

/// The acceptance rule on its own.
pub fn judge(views: &ViewPredictions, conf_threshold: f64) -> Verdict {
    let label = views[0].0;
    if views.iter().any(|&(c, _)| c != label) {
        return Verdict::Rejected(RejectReason::Inconsistent);
    }
    if views.iter().any(|&(_, p)| p < conf_threshold) {
        return Verdict::Rejected(RejectReason::LowConfidence);
    }
    Verdict::Accepted {
        label,
        mean_confidence: mean_confidence(views),
    }
}

fn mean_confidence(views: &ViewPredictions) -> f64 {
    views.iter().map(|&(_, p)| p).sum::<f64>() / views.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub id: String,
    pub views: ViewPredictions,
    pub verdict: Verdict,
}

impl PseudoLabelRecord {
    pub fn mean_confidence(&self) -> f64 {
        mean_confidence(&self.views)
    }

    /// The label the record would carry: the agreed class, or `None` when
    /// the views disagree.
    pub fn consensus(&self) -> Option<usize> {
        let c = self.views[0].0;
        self.views.iter().all(|v| v.0 == c).then_some(c)
    }
}

/// Window features of one unlabelled sample under every augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFeatures {
    pub id: String,
    /// Ground truth when known; only used for reporting purity.
    pub label: Option<usize>,
    /// Indexed like [`Augmentation::ALL`].
    pub views: [Matrix; 4],
}

/// Encode a stream and its three augmented copies with the synthetic encoder.
pub fn augment_and_encode(
    stream: &EventStream,
    encoder: &SyntheticEncoder,
    windowing: &WindowingConfig,
    map: Colormap,
) -> Result<AugmentedFeatures> {
    let mut views = Vec::with_capacity(4);
    for aug in Augmentation::ALL {
        let m = encoder.encode_stream(&aug.apply(stream), windowing, map);
        if m.rows() == 0 {
            return Err(Error::Empty(format!("stream {} has no events", stream.id())));
        }
        views.push(m);
    }
    let views: [Matrix; 4] = views.try_into().expect("four augmentations");
    Ok(AugmentedFeatures {
        id: stream.id().to_string(),
        label: stream.label(),
        views,
    })
}

/// Predict every view and apply the acceptance rule. Records come back in
/// input order.
pub fn label_candidates(
    samples: &[AugmentedFeatures],
    model: &AdaptedClassifier,
    cfg: &PseudoLabelConfig,
) -> Result<Vec<PseudoLabelRecord>> {
    samples
        .iter()
        .map(|s| {
            let mut views = [(0usize, 0.0f64); 4];
            for (v, f) in views.iter_mut().zip(&s.views) {
                let p = model.predict(f)?;
                *v = (p.argmax(), p.max());
            }
            Ok(PseudoLabelRecord {
                id: s.id.clone(),
                views,
                verdict: judge(&views, cfg.conf_threshold),
            })
        })
        .collect()
}

/// Keep at most `top_k` accepted records per class, best mean confidence
/// first with ties going to the smaller id. The rest become `crowded_out`.
pub fn select_top_k(records: &[PseudoLabelRecord], cfg: &PseudoLabelConfig) -> Vec<PseudoLabelRecord> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Verdict::Accepted { label, .. } = r.verdict {
            by_class.entry(label).or_default().push(i);
        }
    }
    let mut out = records.to_vec();
    for members in by_class.values_mut() {
        members.sort_by(|&a, &b| {
            records[b]
                .mean_confidence()
                .total_cmp(&records[a].mean_confidence())
                .then_with(|| records[a].id.cmp(&records[b].id))
        });
        for &i in members.iter().skip(cfg.top_k) {
            out[i].verdict = Verdict::Rejected(RejectReason::CrowdedOut);
        }
    }
    out
}

pub fn write_report_csv<W: Write>(records: &[PseudoLabelRecord], mut sink: W) -> Result<()> {
    writeln!(sink, "id,label,mean_confidence,verdict,reason")?;
    for r in records {
        let label = r.consensus().map(|c| c.to_string()).unwrap_or_default();
        let reason = match r.verdict {
            Verdict::Accepted { .. } => "",
            Verdict::Rejected(reason) => reason.as_str(),
        };
        writeln!(
            sink,
            "{},{},{:.9},{},{}",
            csv_field(&r.id),
            label,
            r.mean_confidence(),
            r.verdict,
            reason
        )?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainReport {
    pub candidates: usize,
    pub accepted: usize,
    pub inconsistent: usize,
    pub low_confidence: usize,
    pub crowded_out: usize,
    pub acceptance_rate: f64,
    /// Accepted samples per class.
    pub per_class: Vec<usize>,
    /// Share of accepted labels matching ground truth, when known.
    pub purity: Option<f64>,
    /// Same for the plain identity-view argmax of every candidate.
    pub unfiltered_purity: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    pub model: AdaptedClassifier,
    pub records: Vec<PseudoLabelRecord>,
    pub report: SelfTrainReport,
    pub curve: Vec<CurvePoint>,
}

fn purity<'a>(pairs: impl Iterator<Item = (usize, Option<usize>)> + 'a) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (pred, truth) in pairs {
        let truth = truth?;
        n += 1;
        hit += usize::from(pred == truth);
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

pub fn summarize(records: &[PseudoLabelRecord], samples: &[AugmentedFeatures], num_classes: usize) -> SelfTrainReport {
    let mut per_class = vec![0usize; num_classes];
    let (mut inconsistent, mut low, mut crowded) = (0, 0, 0);
    for r in records {
        match r.verdict {
            Verdict::Accepted { label, .. } => per_class[label] += 1,
            Verdict::Rejected(RejectReason::Inconsistent) => inconsistent += 1,
            Verdict::Rejected(RejectReason::LowConfidence) => low += 1,
            Verdict::Rejected(RejectReason::CrowdedOut) => crowded += 1,
        }
    }
    let accepted: usize = per_class.iter().sum();
    let truth = |id: &str| samples.iter().find(|s| s.id == id).and_then(|s| s.label);
    let accepted_pairs = records.iter().filter_map(|r| match r.verdict {
        Verdict::Accepted { label, .. } => Some((label, truth(&r.id))),
        _ => None,
    });
    let purity_acc = purity(accepted_pairs);
    let unfiltered = purity(records.iter().map(|r| (r.views[0].0, truth(&r.id))));
    SelfTrainReport {
        candidates: records.len(),
        accepted,
        inconsistent,
        low_confidence: low,
        crowded_out: crowded,
        acceptance_rate: if records.is_empty() {
            0.0
        } else {
            accepted as f64 / records.len() as f64
        },
        per_class,
        purity: purity_acc,
        unfiltered_purity: unfiltered,
    }
}

/// One round of pseudo-labelling followed by joint-adapter training.
///
/// Without `labeled` the zero-shot model produces the labels and a fresh
/// adapter is trained on the accepted set. With `labeled` the adapter is
/// first trained on the labelled shots, labels the pool, and then keeps
/// training from that checkpoint on the labelled and pseudo-labelled union.
pub fn self_train(
    unlabeled: &[AugmentedFeatures],
    labeled: Option<&[TrainSample]>,
    text: &Matrix,
    logit_scale: f64,
    pcfg: &PseudoLabelConfig,
    tcfg: &TrainConfig,
) -> Result<SelfTrainOutcome> {
    PseudoLabelConfig::new(pcfg.conf_threshold, pcfg.top_k)?;
    if unlabeled.is_empty() {
        return Err(Error::Empty("no unlabelled samples".into()));
    }
    let kind = AdapterKind::Joint;
    let (labeler, mut curve) = match labeled {
        Some(shots) if !shots.is_empty() => {
            let out = train_adapter(shots, text, logit_scale, kind, tcfg)?;
            (out.model, out.curve)
        }
        _ => (AdaptedClassifier::zero_shot(text.clone(), logit_scale)?, Vec::new()),
    };
    let records = select_top_k(&label_candidates(unlabeled, &labeler, pcfg)?, pcfg);
    let report = summarize(&records, unlabeled, text.rows());
    if report.accepted == 0 {
        return Err(Error::NoPseudoLabels {
            candidates: report.candidates,
            inconsistent: report.inconsistent,
            low_confidence: report.low_confidence,
        });
    }
    let mut train: Vec<TrainSample> = labeled.map(<[TrainSample]>::to_vec).unwrap_or_default();
    for (r, s) in records.iter().zip(unlabeled) {
        if let Verdict::Accepted { label, .. } = r.verdict {
            train.push(TrainSample {
                id: s.id.clone(),
                features: s.views[0].clone(),
                label,
            });
        }
    }
    let out = match labeled {
        Some(shots) if !shots.is_empty() => continue_training(labeler, &train, kind, tcfg)?,
        _ => train_adapter(&train, text, logit_scale, kind, tcfg)?,
    };
    let offset = curve.len();
    curve.extend(out.curve.into_iter().map(|p| CurvePoint {
        step: p.step + offset,
        ..p
    }));
    Ok(SelfTrainOutcome {
        model: out.model,
        records,
        report,
        curve,
    })
}
