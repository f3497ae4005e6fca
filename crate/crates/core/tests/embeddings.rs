mod common;

use evadapt_core::embed::{
    build_prompts, group_by_sample, read_embeddings, synthetic_encode, synthetic_text_encode, write_embeddings,
    EmbeddingSet, PromptTemplate, SyntheticEncoder,
};
use evadapt_core::frame::{convert, Colormap, EventFrame, WindowingConfig};
use evadapt_core::linalg::{dot, l2_norm, Matrix};
use evadapt_core::synthetic::{gen_synthetic, SyntheticDatasetSpec};
use evadapt_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Matrix {
    let mut r = common::rng(seed);
    let mut m = common::random_matrix(&mut r, rows, dim, 1.0);
    for i in 0..rows {
        let n = l2_norm(m.row(i));
        m.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    m
}

proptest! {
    #[test]
    fn emb1_round_trip_is_bit_exact(rows in 1usize..20, dim in 1usize..40, seed in any::<u64>(), scale in 0.5f32..200.0) {
        let ids = (0..rows).map(|i| format!("s{i}/{}", i % 3)).collect();
        let set = EmbeddingSet::from_matrix(ids, &unit_rows(rows, dim, seed), scale).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&set, &mut buf).unwrap();
        let back = read_embeddings(&buf[..]).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn encoder_outputs_are_unit_norm(seed in any::<u64>(), dim in 8usize..64) {
        let mut r = common::rng(seed);
        let s = common::random_stream(&mut r, 2000, 50);
        let enc = SyntheticEncoder::new(dim, seed).unwrap();
        let f = enc.encode_stream(&s, &WindowingConfig::new(500).unwrap(), Colormap::Gray);
        for row in f.iter_rows() {
            prop_assert!((l2_norm(row) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prompts_are_injective(names in prop::collection::hash_set("[a-z ]{1,12}", 1..20)) {
        let names: Vec<String> = names.into_iter().collect();
        let prompts = build_prompts(&names, &PromptTemplate::default()).unwrap();
        let unique: std::collections::HashSet<_> = prompts.iter().collect();
        prop_assert_eq!(unique.len(), names.len());
    }
}

#[test]
fn prompt_examples() {
    let p = build_prompts(&["dog"], &PromptTemplate::default()).unwrap();
    assert_eq!(p, ["a point cloud image of a dog"]);
    let tpl = PromptTemplate::new("an edge map of a [CLASS]").unwrap();
    assert_eq!(build_prompts(&["car"], &tpl).unwrap(), ["an edge map of a car"]);
    assert!(build_prompts::<&str>(&[], &tpl).is_err());
    assert!(PromptTemplate::new("no placeholder").is_err());
    assert!(PromptTemplate::new("[CLASS] and [CLASS]").is_err());
}

#[test]
fn reader_normalises_and_validates() {
    let set = EmbeddingSet::new(2, vec!["a".into()], vec![2.0, 0.0], 0.0).unwrap();
    let back = EmbeddingSet::from_bytes(&set.to_bytes().unwrap()).unwrap();
    assert_eq!(back.row(0), &[1.0, 0.0]);
    assert!(back.normalized);
    assert_eq!(back.logit_scale, 100.0);

    let bad = EmbeddingSet::new(2, vec!["a".into(), "b".into()], vec![1.0, 0.0, f32::NAN, 1.0], 1.0).unwrap();
    assert!(matches!(
        EmbeddingSet::from_bytes(&bad.to_bytes().unwrap()),
        Err(Error::NonFinite { row: 1 })
    ));

    let mut bytes = set.to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(matches!(EmbeddingSet::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    let mut bytes = set.to_bytes().unwrap();
    bytes.push(0);
    assert!(matches!(
        EmbeddingSet::from_bytes(&bytes),
        Err(Error::DimensionMismatch(_))
    ));
}

#[test]
fn frames_group_by_sample() {
    let ids = ["b/1", "a/0", "b/0", "c"].map(String::from).to_vec();
    let m = unit_rows(4, 3, 1);
    let set = EmbeddingSet::from_matrix(ids, &m, 100.0).unwrap();
    let groups = group_by_sample(&set).unwrap();
    let names: Vec<&str> = groups.iter().map(|(s, _)| s.as_str()).collect();
    assert_eq!(names, ["b", "a", "c"]);
    assert_eq!(groups[0].1, set.select(&[2, 0]));
}

fn clean_dataset() -> (SyntheticDatasetSpec, Vec<evadapt_core::events::EventStream>) {
    let spec = SyntheticDatasetSpec::default();
    let data = gen_synthetic(&spec).unwrap();
    (spec, data)
}

fn whole_stream_frame(s: &evadapt_core::events::EventStream) -> EventFrame {
    EventFrame::from_window(s.events(), s.width() as usize, s.height() as usize, Colormap::Gray)
}

#[test]
fn encoder_is_deterministic() {
    let (_, data) = clean_dataset();
    let f = whole_stream_frame(&data[0]);
    assert_eq!(
        synthetic_encode(&f, 64, 9).unwrap(),
        synthetic_encode(&f, 64, 9).unwrap()
    );
    assert_ne!(
        synthetic_encode(&f, 64, 9).unwrap(),
        synthetic_encode(&f, 64, 10).unwrap()
    );
    assert!(synthetic_encode(&f, 7, 0).is_err());
}

#[test]
fn same_class_frames_are_closer_than_different_class_frames() {
    let (spec, data) = clean_dataset();
    let enc = SyntheticEncoder::new(256, 0).unwrap();
    let feats: Vec<Vec<f64>> = data.iter().map(|s| enc.encode(&whole_stream_frame(s))).collect();
    let per = spec.samples_per_class;
    let mut r = common::rng(5);
    for _ in 0..100 {
        let c = r.random_range(0..spec.num_classes);
        let mut d = r.random_range(0..spec.num_classes - 1);
        if d >= c {
            d += 1;
        }
        let (i, j) = (r.random_range(0..per), r.random_range(1..per));
        let a = &feats[c * per + i];
        let same = &feats[c * per + (i + j) % per];
        let other = &feats[d * per + r.random_range(0..per)];
        assert!(dot(a, same) > dot(a, other), "class {c} vs {d}");
    }
}

#[test]
fn text_stand_in_aligns_with_its_own_class() {
    let (spec, data) = clean_dataset();
    let k = spec.num_classes;
    let dim = 256;
    let text: Vec<Vec<f64>> = (0..k)
        .map(|c| synthetic_text_encode(c, k, dim, 0, spec.width, spec.height).unwrap())
        .collect();
    for t in &text {
        assert!((l2_norm(t) - 1.0).abs() < 1e-9);
    }
    assert!(synthetic_text_encode(k, k, dim, 0, spec.width, spec.height).is_err());
    let enc = SyntheticEncoder::new(dim, 0).unwrap();
    let cfg = WindowingConfig::new(spec.events_per_sample).unwrap();
    for s in &data {
        let c = s.label().unwrap();
        let frame = &convert(s, &cfg, Colormap::Gray)[0];
        let f = enc.encode(frame);
        let own = dot(&f, &text[c]);
        for (d, t) in text.iter().enumerate() {
            if d != c {
                assert!(own > dot(&f, t), "{} closer to class {d}", s.id());
            }
        }
    }
}
