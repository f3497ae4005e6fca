mod common;

use common::{
    finite_difference_check, jiggle, random_matrix, random_model, rng, structural_zero_magnitudes, worst_rel_err,
    FD_TOLERANCE, ZERO_ANALYTIC, ZERO_NUMERIC,
};
use evadapt_core::adapter::{
    checkpoint_bytes, AdaptedClassifier, OutputInit, TransformerAdapter, TransformerConfig, VisualAdapter,
};
use evadapt_core::linalg::Matrix;
use evadapt_core::train::{
    self, adam_step, init_model, lr_at, train_adapter, AdamState, AdapterKind, TrainConfig, TrainSample,
};
use rand::Rng;

#[test]
fn gradients_match_finite_differences_for_every_kind() {
    let mut r = rng(100);
    for kind in AdapterKind::ALL {
        for _ in 0..5 {
            let dim = r.random_range(2..=16);
            let m = r.random_range(1..=4);
            let k = r.random_range(2..=5);
            let model = random_model(kind, dim, k, &mut r);
            let f = random_matrix(&mut r, m, dim, 1.0);
            let label = r.random_range(0..k);
            let check = finite_difference_check(&model, &f, label, None);
            let (name, err) = worst_rel_err(&check);
            assert!(err < FD_TOLERANCE, "{kind}: {name} rel err {err:e}");
            let (za, zn) = structural_zero_magnitudes(&check);
            assert!(
                za < ZERO_ANALYTIC && zn < ZERO_NUMERIC,
                "{kind}: key bias {za:e} {zn:e}"
            );
        }
    }
}

#[test]
fn default_architecture_gradients_spot_check() {
    let mut r = rng(7);
    let dim = 16;
    let t = TransformerAdapter::with_init(TransformerConfig::default(), dim, 0.5, 3, OutputInit::Xavier).unwrap();
    let text = random_matrix(&mut r, 4, dim, 1.0);
    let mut model = AdaptedClassifier::new(VisualAdapter::Transformer(t), text, 10.0).unwrap();
    jiggle(&mut model, &mut r, 0.02);
    let f = random_matrix(&mut r, 3, dim, 1.0);
    let picks = |_t: usize, len: usize| vec![0, len / 3, len / 2, len - 1];
    let check = finite_difference_check(&model, &f, 2, Some(&picks));
    let (name, err) = worst_rel_err(&check);
    assert!(err < FD_TOLERANCE, "{name} rel err {err:e}");
    let (za, zn) = structural_zero_magnitudes(&check);
    assert!(za < ZERO_ANALYTIC && zn < ZERO_NUMERIC, "key bias {za:e} {zn:e}");
}

#[test]
fn loss_closed_forms() {
    // Identical text rows give uniform probabilities.
    let row: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
    let text = Matrix::from_rows(&vec![row; 10]).unwrap();
    let model = AdaptedClassifier::zero_shot(text, 100.0).unwrap();
    let f = Matrix::from_rows(&[vec![1.0, 0.0, 0.3, 0.0, 0.0, 0.2]]).unwrap();
    assert!((train::loss(&model, &f, 3).unwrap() - 10f64.ln()).abs() < 1e-12);
    assert!(train::loss(&model, &f, 10).is_err());

    // A dominant class saturates to probability 1 and loss 0.
    let text = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let model = AdaptedClassifier::zero_shot(text, 100.0).unwrap();
    let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    assert!(train::loss(&model, &f, 0).unwrap() < 1e-12);
    // The floored probability caps the loss at -ln 1e-12.
    let capped = train::loss(&model, &f, 1).unwrap();
    assert!((capped - (-(1e-12f64).ln())).abs() < 1e-9, "{capped}");
}

#[test]
fn one_adam_step_descends_on_a_single_sample() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let mut model = random_model(AdapterKind::Joint, 8, 4, &mut r);
        let f = random_matrix(&mut r, 3, 8, 1.0);
        let label = r.random_range(0..4);
        let g = train::grad(&model, &f, label).unwrap();
        let mut state = AdamState::for_model(&model);
        let grads = g.params.tensors();
        adam_step(model.tensors_mut(), &grads, &mut state, 1e-4).unwrap();
        let after = train::loss(&model, &f, label).unwrap();
        assert!(after < g.loss, "seed {seed}: {} -> {after}", g.loss);
    }
}

#[test]
fn alpha_one_cuts_the_visual_path() {
    let mut r = rng(12);
    for kind in [AdapterKind::VisualTransformer, AdapterKind::VisualMlp] {
        let mut model = random_model(kind, 8, 3, &mut r);
        match &mut model.visual {
            VisualAdapter::Transformer(t) => t.alpha = 1.0,
            VisualAdapter::Mlp(m) => m.ratio = 1.0,
            VisualAdapter::Identity => unreachable!(),
        }
        let f = random_matrix(&mut r, 3, 8, 1.0);
        let g = train::grad(&model, &f, 0).unwrap();
        for t in g.params.visual.tensors() {
            assert!(t.iter().all(|&v| v == 0.0), "{kind}");
        }
    }
}

fn toy_samples(r: &mut rand_chacha::ChaCha8Rng, n: usize, dim: usize, k: usize) -> Vec<TrainSample> {
    (0..n)
        .map(|i| {
            let m = r.random_range(1..=3);
            TrainSample {
                id: format!("s{i}"),
                features: random_matrix(r, m, dim, 1.0),
                label: i % k,
            }
        })
        .collect()
}

fn small_cfg(kind: AdapterKind) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 3,
        transformer: common::small_transformer_config(),
        mlp_max_windows: 3,
        ..TrainConfig::for_kind(kind)
    }
}

#[test]
fn alpha_one_visual_training_has_a_flat_loss_curve() {
    let mut r = rng(13);
    let samples = toy_samples(&mut r, 6, 8, 3);
    let text = random_matrix(&mut r, 3, 8, 1.0);
    let cfg = TrainConfig {
        alpha: 1.0,
        ..small_cfg(AdapterKind::VisualTransformer)
    };
    let out = train_adapter(&samples, &text, 20.0, AdapterKind::VisualTransformer, &cfg).unwrap();
    assert_eq!(out.curve.len(), 8);
    let per_epoch: Vec<f64> = out.curve.chunks(2).map(|c| c.iter().map(|p| p.loss).sum()).collect();
    for l in &per_epoch {
        assert!((l - per_epoch[0]).abs() < 1e-12, "{per_epoch:?}");
    }
}

#[test]
fn duplicated_windows_get_identical_feature_gradients() {
    let mut r = rng(14);
    for kind in [AdapterKind::VisualTransformer, AdapterKind::Text, AdapterKind::Joint] {
        let model = random_model(kind, 8, 3, &mut r);
        let base = random_matrix(&mut r, 3, 8, 1.0);
        let f = base.permute_rows(&[0, 1, 2, 1]);
        let g = train::grad(&model, &f, 2).unwrap();
        for (a, b) in g.features.row(1).iter().zip(g.features.row(3)) {
            assert!((a - b).abs() <= 1e-12, "{kind}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let mut r = rng(15);
    let samples = toy_samples(&mut r, 4, 8, 2);
    let text = random_matrix(&mut r, 2, 8, 1.0);
    for kind in AdapterKind::ALL {
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg(kind)
        };
        let out = train_adapter(&samples, &text, 20.0, kind, &cfg).unwrap();
        assert_eq!(out.model, init_model(kind, &text, 20.0, &cfg).unwrap());
        assert!(out.curve.is_empty());
    }
}

#[test]
fn training_is_bit_deterministic() {
    let mut r = rng(16);
    let samples = toy_samples(&mut r, 7, 8, 3);
    let text = random_matrix(&mut r, 3, 8, 1.0);
    for kind in AdapterKind::ALL {
        let cfg = small_cfg(kind);
        let a = train_adapter(&samples, &text, 20.0, kind, &cfg).unwrap();
        let b = train_adapter(&samples, &text, 20.0, kind, &cfg).unwrap();
        assert_eq!(
            checkpoint_bytes(&a.model).unwrap(),
            checkpoint_bytes(&b.model).unwrap(),
            "{kind}"
        );
        assert_ne!(
            a.model,
            init_model(kind, &text, 20.0, &cfg).unwrap(),
            "{kind} did not move"
        );
    }
}

#[test]
fn frozen_groups_keep_their_values() {
    let mut r = rng(17);
    let samples = toy_samples(&mut r, 5, 8, 2);
    let text = random_matrix(&mut r, 2, 8, 1.0);
    let cfg = small_cfg(AdapterKind::VisualTransformer);
    let out = train_adapter(&samples, &text, 20.0, AdapterKind::VisualTransformer, &cfg).unwrap();
    assert_eq!(out.model.text, text);
    let cfg = small_cfg(AdapterKind::Text);
    let out = train_adapter(&samples, &text, 20.0, AdapterKind::Text, &cfg).unwrap();
    assert_ne!(out.model.text, text);
}

#[test]
fn schedule_is_continuous_at_the_warmup_junction() {
    let (total, peak) = (1000, 2e-4);
    let warm = 50;
    assert_eq!(lr_at(warm, total, peak, 0.05), peak);
    let after = lr_at(warm + 1, total, peak, 0.05);
    let gap = peak * 0.5 * (1.0 - (std::f64::consts::PI / (total - warm) as f64).cos());
    assert!((peak - after - gap).abs() < 1e-18);
    assert!(peak - after < 1e-9);
    assert!((lr_at(25, total, peak, 0.05) - 1e-4).abs() < 1e-18);
    assert!((lr_at(525, total, peak, 0.05) - 1e-4).abs() < 1e-15);
    assert_eq!(lr_at(total, total, peak, 0.05), 0.0);
}

#[test]
fn invalid_configs_and_inputs_are_rejected() {
    let mut r = rng(18);
    let samples = toy_samples(&mut r, 3, 8, 2);
    let text = random_matrix(&mut r, 2, 8, 1.0);
    let kind = AdapterKind::Text;
    for cfg in [
        TrainConfig {
            warmup_fraction: 0.0,
            ..small_cfg(kind)
        },
        TrainConfig {
            peak_lr_text: -1.0,
            ..small_cfg(kind)
        },
        TrainConfig {
            batch_size: 0,
            ..small_cfg(kind)
        },
    ] {
        assert!(train_adapter(&samples, &text, 20.0, kind, &cfg).is_err());
    }
    assert!(train_adapter(&[], &text, 20.0, kind, &small_cfg(kind)).is_err());
    let bad = vec![TrainSample {
        id: "x".into(),
        features: random_matrix(&mut r, 1, 8, 1.0),
        label: 5,
    }];
    assert!(train_adapter(&bad, &text, 20.0, kind, &small_cfg(kind)).is_err());
}
