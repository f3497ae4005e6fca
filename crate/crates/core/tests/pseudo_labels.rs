mod common;

use common::{random_matrix, random_model, rng, small_transformer_config};
use evadapt_core::adapter::AdaptedClassifier;
use evadapt_core::embed::SyntheticEncoder;
use evadapt_core::frame::{Colormap, WindowingConfig};
use evadapt_core::linalg::Matrix;
use evadapt_core::pseudo::{
    augment_and_encode, label_candidates, select_top_k, self_train, summarize, write_report_csv, Augmentation,
    AugmentedFeatures, PseudoLabelConfig, PseudoLabelRecord, Verdict,
};
use evadapt_core::synthetic::{gen_synthetic, SyntheticDatasetSpec};
use evadapt_core::train::{AdapterKind, TrainConfig, TrainSample};
use evadapt_core::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_pool(r: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<AugmentedFeatures> {
    (0..n)
        .map(|i| {
            let m = r.random_range(1..=3);
            let views = std::array::from_fn(|_| random_matrix(r, m, dim, 1.0));
            AugmentedFeatures {
                id: format!("u{i:03}"),
                label: None,
                views,
            }
        })
        .collect()
}

fn accepted(records: &[PseudoLabelRecord]) -> usize {
    records.iter().filter(|r| r.verdict.is_accepted()).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn raising_the_threshold_never_accepts_more(seed in any::<u64>(), top_k in 1usize..6) {
        let mut r = rng(seed);
        let model = random_model(AdapterKind::Joint, 6, 3, &mut r);
        let pool = random_pool(&mut r, 40, 6);
        let mut last = usize::MAX;
        for t in [0.01, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999, 0.999_999] {
            let cfg = PseudoLabelConfig::new(t, top_k).unwrap();
            let records = select_top_k(&label_candidates(&pool, &model, &cfg).unwrap(), &cfg);
            let n = accepted(&records);
            prop_assert!(n <= last, "threshold {} accepted {} after {}", t, n, last);
            prop_assert!(n <= model.num_classes() * top_k);
            let report = summarize(&records, &pool, model.num_classes());
            prop_assert!(report.per_class.iter().all(|&c| c <= top_k));
            prop_assert_eq!(report.accepted + report.inconsistent + report.low_confidence + report.crowded_out, pool.len());
            last = n;
        }
    }
}

#[test]
fn augmentations_are_the_four_flip_reverse_combinations() {
    let names: Vec<&str> = Augmentation::ALL.iter().map(|a| a.name()).collect();
    assert_eq!(names, ["identity", "hflip", "treverse", "hflip+treverse"]);
    let s = gen_synthetic(&SyntheticDatasetSpec {
        samples_per_class: 1,
        ..Default::default()
    })
    .unwrap();
    let both = Augmentation::ALL[3].apply(&s[0]);
    let composed = Augmentation::ALL[2].apply(&Augmentation::ALL[1].apply(&s[0]));
    assert_eq!(both.events(), composed.events());
}

fn synthetic_pool(noise: f64, per_class: usize, enc: &SyntheticEncoder) -> Vec<AugmentedFeatures> {
    let spec = SyntheticDatasetSpec {
        samples_per_class: per_class,
        noise_fraction: noise,
        seed: 1,
        ..Default::default()
    };
    let w = WindowingConfig::new(500).unwrap();
    gen_synthetic(&spec)
        .unwrap()
        .iter()
        .map(|s| augment_and_encode(s, enc, &w, Colormap::Gray).unwrap())
        .collect()
}

fn synthetic_text(enc: &SyntheticEncoder) -> Matrix {
    let names: Vec<String> = (0..10).map(|c| format!("c{c}")).collect();
    enc.text_embeddings(&names, 64, 64, 100.0).unwrap().to_matrix()
}

#[test]
fn filtering_raises_purity_on_noisy_synthetic_data() {
    let enc = SyntheticEncoder::new(16, 0).unwrap();
    let pool = synthetic_pool(0.2, 20, &enc);
    let zs = AdaptedClassifier::zero_shot(synthetic_text(&enc), 100.0).unwrap();
    let cfg = PseudoLabelConfig::semi_supervised();
    let records = select_top_k(&label_candidates(&pool, &zs, &cfg).unwrap(), &cfg);
    let report = summarize(&records, &pool, 10);
    let (purity, unfiltered) = (report.purity.unwrap(), report.unfiltered_purity.unwrap());
    assert!(report.accepted > 0);
    assert!(unfiltered < 1.0, "zero-shot should be imperfect here");
    assert!(purity >= unfiltered, "{purity} < {unfiltered}");
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        transformer: small_transformer_config(),
        ..TrainConfig::for_kind(AdapterKind::Joint)
    }
}

#[test]
fn self_training_is_deterministic_in_both_modes() {
    let enc = SyntheticEncoder::new(16, 0).unwrap();
    let pool = synthetic_pool(0.2, 4, &enc);
    let text = synthetic_text(&enc);
    let shots: Vec<TrainSample> = pool
        .iter()
        .step_by(4)
        .map(|p| TrainSample {
            id: p.id.clone(),
            features: p.views[0].clone(),
            label: p.label.unwrap(),
        })
        .collect();
    let pcfg = PseudoLabelConfig::semi_supervised();
    for labeled in [None, Some(&shots[..])] {
        let a = self_train(&pool, labeled, &text, 100.0, &pcfg, &tiny_train_config()).unwrap();
        let b = self_train(&pool, labeled, &text, 100.0, &pcfg, &tiny_train_config()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.records, b.records);
        assert_eq!(a.report, b.report);
        let steps: Vec<usize> = a.curve.iter().map(|p| p.step).collect();
        assert_eq!(steps, (1..=steps.len()).collect::<Vec<_>>());
    }
}

#[test]
fn nothing_accepted_is_an_error() {
    let mut r = rng(4);
    let pool = random_pool(&mut r, 10, 4);
    let row = vec![0.5, -0.5, 0.5, 0.5];
    let text = Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
    let cfg = PseudoLabelConfig::new(0.5, 5).unwrap();
    let err = self_train(&pool, None, &text, 100.0, &cfg, &tiny_train_config()).unwrap_err();
    assert!(
        matches!(
            err,
            Error::NoPseudoLabels {
                candidates: 10,
                low_confidence: 10,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn report_lists_every_candidate() {
    let mut r = rng(6);
    let model = random_model(AdapterKind::Text, 5, 3, &mut r);
    let mut pool = random_pool(&mut r, 6, 5);
    pool[2].id = "with,comma".into();
    let cfg = PseudoLabelConfig::new(0.4, 1).unwrap();
    let records = select_top_k(&label_candidates(&pool, &model, &cfg).unwrap(), &cfg);
    let mut out = Vec::new();
    write_report_csv(&records, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,label,mean_confidence,verdict,reason");
    assert_eq!(lines.len(), 7);
    assert!(lines[3].starts_with("\"with,comma\","));
    for (line, rec) in lines[1..].iter().zip(&records) {
        let suffix = match rec.verdict {
            Verdict::Accepted { .. } => ",accepted,".to_string(),
            Verdict::Rejected(reason) => format!(",rejected,{}", reason.as_str()),
        };
        assert!(line.ends_with(&suffix), "{line}");
    }
}
