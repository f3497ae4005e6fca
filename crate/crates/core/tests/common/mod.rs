//! Independent oracles and instance builders shared by the integration
//! tests. Nothing here calls the code paths it is used to check.

#![allow(dead_code)]

use evadapt_core::adapter::{
    AdaptedClassifier, MlpAdapter, OutputInit, TransformerAdapter, TransformerConfig, VisualAdapter,
};
use evadapt_core::events::{Event, EventStream};
use evadapt_core::linalg::Matrix;
use evadapt_core::train::{self, AdapterKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-event counting, one pixel lookup per event, no shared helpers.
pub fn count_oracle(events: &[Event], width: usize, height: usize) -> (Vec<u32>, Vec<u32>) {
    let mut pos = vec![vec![0u32; width]; height];
    let mut neg = vec![vec![0u32; width]; height];
    for e in events {
        let cell = if e.p > 0 { &mut pos } else { &mut neg };
        cell[e.y as usize][e.x as usize] += 1;
    }
    (pos.concat(), neg.concat())
}

pub fn random_stream(rng: &mut ChaCha8Rng, max_events: usize, max_side: u16) -> EventStream {
    let w = rng.random_range(1..=max_side);
    let h = rng.random_range(1..=max_side);
    let n = rng.random_range(0..=max_events);
    let events = (0..n)
        .map(|_| {
            Event::new(
                rng.random_range(0..w),
                rng.random_range(0..h),
                rng.random_range(0..1_000_000),
                if rng.random_bool(0.5) { 1 } else { -1 },
            )
        })
        .collect();
    EventStream::new(w, h, events).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Shift every parameter by a small random amount so LayerNorm scales,
/// shifts and biases are not sitting at their special initial values.
pub fn jiggle(model: &mut AdaptedClassifier, rng: &mut ChaCha8Rng, amount: f64) {
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
}

pub fn small_transformer_config() -> TransformerConfig {
    TransformerConfig {
        token_dim: 8,
        heads: 2,
        mlp_dim: 16,
        blocks: 2,
    }
}

/// A random model of the given kind with every parameter on a live path.
pub fn random_model(kind: AdapterKind, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> AdaptedClassifier {
    let alpha = rng.random_range(0.1..0.9);
    let seed = rng.random();
    let visual = match kind {
        AdapterKind::VisualTransformer | AdapterKind::Joint => VisualAdapter::Transformer(
            TransformerAdapter::with_init(small_transformer_config(), dim, alpha, seed, OutputInit::Xavier).unwrap(),
        ),
        AdapterKind::VisualMlp => VisualAdapter::Mlp(MlpAdapter::new(dim, 4, alpha, seed).unwrap()),
        AdapterKind::Text => VisualAdapter::Identity,
    };
    let text = random_matrix(rng, classes, dim, 1.0);
    let scale = rng.random_range(1.0..20.0);
    let mut model = AdaptedClassifier::new(visual, text, scale).unwrap();
    jiggle(&mut model, rng, 0.05);
    model
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Rounding error of one loss evaluation, in ulps of `max(|loss|, 1)`.
/// The deep forward pass was measured at up to ~18.
pub const LOSS_ULPS: f64 = 32.0;

pub struct TensorCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub struct FdCheck {
    pub loss: f64,
    /// One entry per parameter tensor, then `features`.
    pub tensors: Vec<TensorCheck>,
}

impl FdCheck {
    /// Roundoff of `len` central differences, summed in quadrature. Below
    /// this two gradients cannot be told apart at `FD_STEP`.
    pub fn resolution(&self, len: usize) -> f64 {
        (len as f64).sqrt() * LOSS_ULPS * f64::EPSILON * self.loss.abs().max(1.0) / FD_STEP
    }

    /// `||a - n|| / max(||a||, ||n||, resolution / FD_TOLERANCE)`: relative
    /// where the gradient is resolvable, absolute against the resolution
    /// where it is not.
    pub fn error(&self, t: &TensorCheck) -> f64 {
        rel_err(
            &t.analytic,
            &t.numeric,
            self.resolution(t.analytic.len()) / FD_TOLERANCE,
        )
    }
}

/// Central finite differences of the loss for every coordinate listed in
/// `coords` (all coordinates when `None`).
pub fn finite_difference_check(
    model: &AdaptedClassifier,
    features: &Matrix,
    label: usize,
    coords: Option<&dyn Fn(usize, usize) -> Vec<usize>>,
) -> FdCheck {
    let g = train::grad(model, features, label).unwrap();
    let names = model.tensor_names();
    let analytic: Vec<Vec<f64>> = g.params.tensors().iter().map(|t| t.to_vec()).collect();
    let mut tensors = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let picks: Vec<usize> = match coords {
            Some(f) => f(ti, len),
            None => (0..len).collect(),
        };
        let mut a = Vec::with_capacity(picks.len());
        let mut n = Vec::with_capacity(picks.len());
        for &j in &picks {
            let mut plus = model.clone();
            plus.tensors_mut()[ti][j] += FD_STEP;
            let mut minus = model.clone();
            minus.tensors_mut()[ti][j] -= FD_STEP;
            let lp = train::loss(&plus, features, label).unwrap();
            let lm = train::loss(&minus, features, label).unwrap();
            n.push((lp - lm) / (2.0 * FD_STEP));
            a.push(analytic[ti][j]);
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            analytic: a,
            numeric: n,
        });
    }
    let mut a = Vec::new();
    let mut n = Vec::new();
    for j in 0..features.as_slice().len() {
        let mut plus = features.clone();
        plus.as_mut_slice()[j] += FD_STEP;
        let mut minus = features.clone();
        minus.as_mut_slice()[j] -= FD_STEP;
        let lp = train::loss(model, &plus, label).unwrap();
        let lm = train::loss(model, &minus, label).unwrap();
        n.push((lp - lm) / (2.0 * FD_STEP));
        a.push(g.features.as_slice()[j]);
    }
    tensors.push(TensorCheck {
        name: "features".into(),
        analytic: a,
        numeric: n,
    });
    FdCheck { loss: g.loss, tensors }
}

/// Attention scores shift by `q . b_k` uniformly across a softmax row, so
/// the key bias never reaches the loss and its true gradient is zero.
pub fn structurally_zero(name: &str) -> bool {
    name.ends_with("key.bias")
}

/// Worst per-tensor error of a finite-difference check, over the tensors
/// with a live gradient.
pub fn worst_rel_err(check: &FdCheck) -> (String, f64) {
    check
        .tensors
        .iter()
        .filter(|t| !structurally_zero(&t.name))
        .map(|t| (t.name.clone(), check.error(t)))
        .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// Largest analytic and numeric magnitude over structurally zero tensors.
pub fn structural_zero_magnitudes(check: &FdCheck) -> (f64, f64) {
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    check
        .tensors
        .iter()
        .filter(|t| structurally_zero(&t.name))
        .fold((0.0, 0.0), |(a, b), t| {
            (a.max(max_abs(&t.analytic)), b.max(max_abs(&t.numeric)))
        })
}

/// Analytic values above this on a structurally zero tensor are a bug,
/// not roundoff.
pub const ZERO_ANALYTIC: f64 = 1e-12;
/// Central differences of a quantity that does not change are pure
/// roundoff, about `eps * |loss| / h`.
pub const ZERO_NUMERIC: f64 = 1e-8;

/// `exp(z_i) / sum exp(z)` written out directly.
pub fn softmax_oracle(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A unit feature and unit text rows whose cosines with it are `cos`.
pub fn weights_for_cosines(cos: &[f64]) -> (Vec<f64>, Matrix) {
    // Feature e0; class i is cos_i * e0 + sin_i * e_{i+1}.
    let dim = cos.len() + 1;
    let mut f = vec![0.0; dim];
    f[0] = 1.0;
    let rows: Vec<Vec<f64>> = cos
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut r = vec![0.0; dim];
            r[0] = c;
            r[i + 1] = (1.0 - c * c).sqrt();
            r
        })
        .collect();
    (f, Matrix::from_rows(&rows).unwrap())
}
