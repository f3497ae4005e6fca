//! Loss, reverse-mode gradients, Adam and the training loop.
//!
//! The loss is cross-entropy on the mean-pooled window probabilities, the
//! same quantity used for prediction. Every sample is run forward and
//! backward on its own, so samples with different window counts can share a
//! batch; gradients are averaged over the batch.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{
    AdaptedClassifier, MlpAdapter, TransformerAdapter, TransformerConfig, VisualAdapter, ALPHA_JOINT, ALPHA_VISUAL,
    DEFAULT_MAX_WINDOWS,
};
use crate::linalg::{dot, l2_norm, Matrix};
use crate::zeroshot::{aggregate, classify_windows, normalize_rows};
use crate::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which parameters are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    /// Transformer visual adapter, text weights frozen.
    VisualTransformer,
    /// MLP visual adapter, text weights frozen.
    VisualMlp,
    /// Text weights only.
    Text,
    /// Transformer visual adapter and text weights together.
    Joint,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 4] = [
        AdapterKind::VisualTransformer,
        AdapterKind::VisualMlp,
        AdapterKind::Text,
        AdapterKind::Joint,
    ];

    pub fn trains_visual(self) -> bool {
        !matches!(self, AdapterKind::Text)
    }

    pub fn trains_text(self) -> bool {
        matches!(self, AdapterKind::Text | AdapterKind::Joint)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::VisualTransformer => "visual_transformer",
            AdapterKind::VisualMlp => "visual_mlp",
            AdapterKind::Text => "text",
            AdapterKind::Joint => "joint",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown adapter kind {s:?} (expected visual_transformer, visual_mlp, text or joint)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Capped at the number of training samples.
    pub batch_size: usize,
    pub peak_lr_visual: f64,
    pub peak_lr_text: f64,
    pub warmup_fraction: f64,
    /// Residual ratio of the visual adapter.
    pub alpha: f64,
    pub seed: u64,
    pub transformer: TransformerConfig,
    pub mlp_max_windows: usize,
}

impl Default for TrainConfig {
    /// 100 epochs, batch 32, 5% warmup, lr 2e-4 for the visual adapter and
    /// 1e-3 for the text weights, alpha 0.5.
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            peak_lr_visual: 2e-4,
            peak_lr_text: 1e-3,
            warmup_fraction: 0.05,
            alpha: ALPHA_VISUAL,
            seed: 0,
            transformer: TransformerConfig::default(),
            mlp_max_windows: DEFAULT_MAX_WINDOWS,
        }
    }
}

impl TrainConfig {
    /// Defaults tuned per adapter kind. Joint training uses alpha 0.8 and
    /// 2e-4 for both parameter groups; text-only training uses 1e-3.
    pub fn for_kind(kind: AdapterKind) -> Self {
        let base = Self::default();
        match kind {
            AdapterKind::Joint => Self {
                alpha: ALPHA_JOINT,
                peak_lr_text: base.peak_lr_visual,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "warmup fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        for (name, lr) in [("visual", self.peak_lr_visual), ("text", self.peak_lr_text)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} learning rate {lr} must be positive"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "residual ratio {} outside [0, 1]",
                self.alpha
            )));
        }
        self.transformer.validate()
    }
}

/// One labelled training example: its window features and class.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub features: Matrix,
    pub label: usize,
}

/// The untrained model for `kind`.
pub fn init_model(kind: AdapterKind, text: &Matrix, logit_scale: f64, cfg: &TrainConfig) -> Result<AdaptedClassifier> {
    let dim = text.cols();
    let visual = match kind {
        AdapterKind::VisualTransformer | AdapterKind::Joint => {
            VisualAdapter::Transformer(TransformerAdapter::new(cfg.transformer, dim, cfg.alpha, cfg.seed)?)
        }
        AdapterKind::VisualMlp => VisualAdapter::Mlp(MlpAdapter::new(dim, cfg.mlp_max_windows, cfg.alpha, cfg.seed)?),
        AdapterKind::Text => VisualAdapter::Identity,
    };
    AdaptedClassifier::new(visual, text.clone(), logit_scale)
}

fn check_label(label: usize, k: usize) -> Result<()> {
    if label >= k {
        return Err(Error::LabelOutOfRange { label, num_classes: k });
    }
    Ok(())
}

/// `-ln max(p_label, 1e-12)` of the pooled adapted probabilities.
pub fn loss(model: &AdaptedClassifier, features: &Matrix, label: usize) -> Result<f64> {
    check_label(label, model.num_classes())?;
    let p = model.predict(features)?;
    Ok(nll(p.as_slice(), label))
}

/// Sum of every probability except `label`'s, i.e. `1 - p_label` without
/// the cancellation.
fn others(p: &[f64], label: usize) -> f64 {
    p.iter().enumerate().filter(|&(j, _)| j != label).map(|(_, v)| v).sum()
}

/// `-ln p_label` with the floor. Near-certain predictions go through
/// `ln_1p` so the loss keeps full relative precision as it approaches 0.
fn nll(p: &[f64], label: usize) -> f64 {
    let p_y = p[label];
    if p_y <= PROB_FLOOR {
        return -PROB_FLOOR.ln();
    }
    let rest = others(p, label);
    if rest < 0.5 {
        -(-rest).ln_1p()
    } else {
        -p_y.ln()
    }
}

/// Loss and its gradients for one sample.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// Same shape as the model.
    pub params: AdaptedClassifier,
    /// `dL/dF`, one row per input window.
    pub features: Matrix,
}

pub fn grad(model: &AdaptedClassifier, features: &Matrix, label: usize) -> Result<Gradients> {
    let mut params = model.zeros_like();
    let (loss, features) = accumulate_grad(model, features, label, &mut params)?;
    Ok(Gradients { loss, params, features })
}

/// Backward through `v / |v|` for each row. Zero rows pass no gradient.
fn normalize_rows_backward(raw: &Matrix, unit: &Matrix, dunit: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        let n = l2_norm(raw.row(r));
        if n == 0.0 {
            continue;
        }
        let u = unit.row(r);
        let du = dunit.row(r);
        let proj = dot(u, du);
        for ((o, &ui), &dui) in out.row_mut(r).iter_mut().zip(u).zip(du) {
            *o = (dui - ui * proj) / n;
        }
    }
    out
}

/// Adds this sample's parameter gradients into `acc` and returns the loss
/// and `dL/dF`.
pub(crate) fn accumulate_grad(
    model: &AdaptedClassifier,
    features: &Matrix,
    label: usize,
    acc: &mut AdaptedClassifier,
) -> Result<(f64, Matrix)> {
    let k = model.num_classes();
    check_label(label, k)?;
    let (adapted, cache) = model.visual.forward_cached(features)?;
    let per_window = classify_windows(&adapted, &model.text, model.logit_scale)?;
    let pooled = aggregate(&per_window)?;
    let p_y = pooled.as_slice()[label];
    let loss = nll(pooled.as_slice(), label);

    let m = adapted.rows();
    let s = model.logit_scale;
    let unit_feat = normalize_rows(&adapted);
    let unit_text = normalize_rows(&model.text);
    // d loss / d p_y is zero once the floor is active.
    let dp_y = if p_y > PROB_FLOOR { -1.0 / p_y } else { 0.0 };

    let mut dcos = Matrix::zeros(m, k);
    for (r, probs) in per_window.iter().enumerate() {
        let p = probs.as_slice();
        let dp = dp_y / m as f64;
        // softmax backward with the upstream gradient nonzero only at `label`
        let rest = others(p, label);
        let row = dcos.row_mut(r);
        for (j, o) in row.iter_mut().enumerate() {
            let centred = if j == label { rest } else { -p[j] };
            *o = s * dp * p[label] * centred;
        }
    }

    let mut dunit_feat = Matrix::zeros(m, unit_feat.cols());
    let mut dunit_text = Matrix::zeros(k, unit_text.cols());
    for r in 0..m {
        for j in 0..k {
            let g = dcos.get(r, j);
            if g == 0.0 {
                continue;
            }
            for (o, &v) in dunit_feat.row_mut(r).iter_mut().zip(unit_text.row(j)) {
                *o += g * v;
            }
            for (o, &v) in dunit_text.row_mut(j).iter_mut().zip(unit_feat.row(r)) {
                *o += g * v;
            }
        }
    }

    let dadapted = normalize_rows_backward(&adapted, &unit_feat, &dunit_feat);
    let dtext = normalize_rows_backward(&model.text, &unit_text, &dunit_text);
    acc.text.add_assign(&dtext);
    let dfeatures = model.visual.backward(&cache, &dadapted, &mut acc.visual);
    Ok((loss, dfeatures))
}

/// Adam with bias correction. One pair of moment buffers per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &AdaptedClassifier) -> Self {
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Self::new(&shapes)
    }

    /// One update with a learning rate per tensor. Non-finite gradients are
    /// rejected before anything is modified.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lrs: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || lrs.len() != params.len() {
            return Err(Error::DimensionMismatch(format!(
                "Adam got {} tensors, {} gradients, {} learning rates for {} moment buffers",
                params.len(),
                grads.len(),
                lrs.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || g.len() != self.m[i].len() {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {i}: parameter/gradient shapes differ"
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite gradient in tensor {i}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let lr = lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Single-learning-rate Adam step over parallel tensor lists.
pub fn adam_step(params: Vec<&mut [f64]>, grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    let lrs = vec![lr; params.len()];
    state.update(params, grads, &lrs)
}

/// Learning rate at `step` of `total`: linear warmup from 0 to `peak` over
/// `ceil(warmup_fraction * total)` steps, then cosine decay reaching 0 at
/// `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let warm = (warmup_fraction * total as f64).ceil() as usize;
    if warm > 0 && step <= warm {
        return peak * step as f64 / warm as f64;
    }
    if warm >= total {
        return 0.0;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Indices chosen for few-shot training and the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSplit {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Draw `shots` indices per class from `labels`. Classes with fewer samples
/// contribute all of them and produce a warning. Both index lists are
/// sorted ascending.
pub fn sample_few_shot(labels: &[usize], shots: usize, seed: u64) -> Result<FewShotSplit> {
    let Some(&max) = labels.iter().max() else {
        return Err(Error::Empty("cannot sample from an empty dataset".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; labels.len()];
    let mut warnings = Vec::new();
    for class in 0..=max {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < shots {
            warnings.push(format!(
                "class {class} has only {} samples, fewer than {shots} shots",
                members.len()
            ));
        }
        members.shuffle(&mut rng);
        for &i in members.iter().take(shots) {
            chosen[i] = true;
        }
    }
    let (train, held_out) = (0..labels.len()).partition(|&i| chosen[i]);
    Ok(FewShotSplit {
        train,
        held_out,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    /// Mean loss over the batch, measured before the update.
    pub loss: f64,
}

pub fn write_loss_curve<W: Write>(curve: &[CurvePoint], mut sink: W) -> Result<()> {
    writeln!(sink, "step,lr,loss")?;
    for p in curve {
        writeln!(sink, "{},{:e},{}", p.step, p.lr, p.loss)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AdaptedClassifier,
    pub curve: Vec<CurvePoint>,
}

/// Build the initial model for `kind` and train it.
pub fn train_adapter(
    samples: &[TrainSample],
    text: &Matrix,
    logit_scale: f64,
    kind: AdapterKind,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = init_model(kind, text, logit_scale, cfg)?;
    continue_training(model, samples, kind, cfg)
}

/// Train an existing model. Parameters `kind` does not train keep their
/// values bit for bit.
pub fn continue_training(
    mut model: AdaptedClassifier,
    samples: &[TrainSample],
    kind: AdapterKind,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    for s in samples {
        check_label(s.label, model.num_classes())?;
        if s.features.cols() != model.dim() {
            return Err(Error::DimensionMismatch(format!(
                "sample {} has {}-dim features, model expects {}",
                s.id,
                s.features.cols(),
                model.dim()
            )));
        }
    }
    let batch = cfg.batch_size.min(samples.len());
    let per_epoch = samples.len().div_ceil(batch);
    let total = cfg.epochs * per_epoch;
    let mut adam = AdamState::for_model(&model);
    let num_visual = model.visual.tensors().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut acc = model.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (l, _) = accumulate_grad(&model, &samples[i].features, samples[i].label, &mut acc)?;
                batch_loss += l;
            }
            let n = chunk.len() as f64;
            batch_loss /= n;
            step += 1;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { step, loss: batch_loss });
            }
            for t in acc.tensors_mut() {
                t.iter_mut().for_each(|g| *g /= n);
            }
            let lr_v = if kind.trains_visual() {
                lr_at(step, total, cfg.peak_lr_visual, cfg.warmup_fraction)
            } else {
                0.0
            };
            let lr_t = if kind.trains_text() {
                lr_at(step, total, cfg.peak_lr_text, cfg.warmup_fraction)
            } else {
                0.0
            };
            let mut lrs = vec![lr_v; num_visual];
            lrs.push(lr_t);
            let grads = acc.tensors();
            adam.update(model.tensors_mut(), &grads, &lrs).map_err(|e| match e {
                Error::InvalidArgument(_) => Error::Diverged { step, loss: batch_loss },
                other => other,
            })?;
            let lr = if kind.trains_visual() { lr_v } else { lr_t };
            curve.push(CurvePoint {
                step,
                lr,
                loss: batch_loss,
            });
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Top-1 accuracy of `model` on labelled samples.
pub fn accuracy(model: &AdaptedClassifier, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        if model.predict(&s.features)?.argmax() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let lr = |s| lr_at(s, 1000, 2e-4, 0.05);
        assert!((lr(25) - 1e-4).abs() < 1e-18);
        assert!((lr(50) - 2e-4).abs() < 1e-18);
        assert!((lr(525) - 1e-4).abs() < 1e-15);
        assert_eq!(lr(1000), 0.0);
        assert_eq!(lr(0), 0.0);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = [1.0];
        let mut st = AdamState::new(&[1]);
        adam_step(vec![&mut p[..]], &[&[0.5]], &mut st, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + ADAM_EPS);
        assert_eq!(p[0], expected);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_nan_without_touching_anything() {
        let mut a = vec![1.0, 2.0];
        let mut b = vec![3.0];
        let mut st = AdamState::new(&[2, 1]);
        let before = st.clone();
        let err = adam_step(vec![&mut a[..], &mut b[..]], &[&[0.1, 0.2], &[f64::NAN]], &mut st, 0.1);
        assert!(err.is_err());
        assert_eq!((a, b), (vec![1.0, 2.0], vec![3.0]));
        assert_eq!(st, before);
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        let mut p = [1.0];
        let mut st = AdamState::new(&[1]);
        adam_step(vec![&mut p[..]], &[&[1.0]], &mut st, 0.1).unwrap();
        let after_first = p[0];
        let m = st.m[0][0];
        adam_step(vec![&mut p[..]], &[&[0.0]], &mut st, 0.0).unwrap();
        assert_eq!(p[0], after_first);
        assert_eq!(st.m[0][0], 0.9 * m);
    }

    #[test]
    fn few_shot_counts_and_fallback() {
        let mut labels: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat_n(c, 8)).collect();
        labels.extend([10, 10, 10]);
        let a = sample_few_shot(&labels, 5, 7).unwrap();
        let b = sample_few_shot(&labels, 5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 53);
        assert_eq!(a.warnings.len(), 1);
        assert_eq!(a.train.len() + a.held_out.len(), labels.len());
        assert!(a.train.iter().all(|i| !a.held_out.contains(i)));
        assert!(sample_few_shot(&[], 5, 0).is_err());
    }

    #[test]
    fn kind_parsing() {
        for k in AdapterKind::ALL {
            assert_eq!(k.as_str().parse::<AdapterKind>().unwrap(), k);
        }
        assert!("lora".parse::<AdapterKind>().is_err());
    }
}
