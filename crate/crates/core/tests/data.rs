mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;

use common::*;
use giim::case::ViewId;
use giim::data::{generate_synthetic, load_dataset, save_dataset, split_by_patient, SyntheticSpec};
use giim::{Dataset, Error, Task};
use proptest::prelude::*;
use rand::Rng;

fn roundtrip(ds: &Dataset) -> Dataset {
    let dir = tempfile::tempdir().unwrap();
    let (m, c) = (dir.path().join("manifest.json"), dir.path().join("cases.jsonl"));
    save_dataset(ds, &m, &c).unwrap();
    load_dataset(&m, &c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn save_then_load_is_identity(
        patients in 1usize..25,
        views in 1usize..5,
        width in 1usize..6,
        classes in 2usize..5,
        exam in any::<bool>(),
        noise in 0.0f64..3.0,
        mask in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let task = if exam { Task::Exam } else { Task::Lesion };
        let spec = SyntheticSpec::random(patients, (1, 4), classes, views, width, noise, views >= 2, task, seed);
        let mut ds = generate_synthetic(&spec).unwrap();
        if mask && views >= 2 {
            for c in ds.cases.iter_mut().step_by(2) {
                c.mask_view(ViewId(views - 1));
            }
        }
        prop_assert_eq!(roundtrip(&ds), ds);
    }
}

#[test]
fn extreme_values_survive_bit_for_bit() {
    let spec = SyntheticSpec::random(2, (1, 1), 2, 1, 4, 1.0, false, Task::Lesion, 0);
    let mut ds = generate_synthetic(&spec).unwrap();
    let f = ds.cases[0].lesions[0].features[0].as_mut().unwrap();
    f.data_mut().copy_from_slice(&[f64::MIN_POSITIVE, -0.0, 1.0 / 3.0, f64::MAX]);
    let back = roundtrip(&ds);
    let g = back.cases[0].lesions[0].features[0].as_ref().unwrap();
    for (a, b) in g.data().iter().zip(ds.cases[0].lesions[0].features[0].as_ref().unwrap().data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn loads_a_hand_written_file_in_sorted_order() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    let c = dir.path().join("c.jsonl");
    fs::write(
        &m,
        r#"{"view_names":["cc","mlo"],"feature_width":2,"class_names":["a","b","c"],"task":"exam"}"#,
    )
    .unwrap();
    fs::write(
        &c,
        concat!(
            r#"{"patient_id":"z","exam_label":2,"lesions":[{"lesion_id":"b","label":2,"features":{"cc":[1,2],"mlo":null}},{"lesion_id":"a","label":0,"features":{"cc":[0,0],"mlo":[1,1]}}]}"#,
            "\n",
            r#"{"patient_id":"y","exam_label":1,"lesions":[{"lesion_id":"x","label":1,"features":{"cc":[5,5],"mlo":[6,6]}}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let ds = load_dataset(&m, &c).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.cases[0].patient_id, "y");
    assert_eq!(ds.cases[1].lesions.len(), 2);
    assert_eq!(ds.cases[1].lesions[0].lesion_id, "a");
    assert!(ds.cases[1].lesions[1].features[1].is_none());
}

#[test]
fn malformed_files_give_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    fs::write(
        &m,
        r#"{"view_names":["cc","mlo"],"feature_width":2,"class_names":["a","b"],"task":"lesion"}"#,
    )
    .unwrap();
    let ok = r#"{"patient_id":"p1","lesions":[{"lesion_id":"l","label":0,"features":{"cc":[1,2],"mlo":[3,4]}}]}"#;
    let cases = [
        (r#"{"patient_id":"p2","lesions":[{"lesion_id":"l","label":0,"features":{"cc":[1],"mlo":[3,4]}}]}"#, "cc"),
        (r#"{"patient_id":"p2","lesions":[{"lesion_id":"l","label":0,"features":{"ax":[1,2],"mlo":[3,4]}}]}"#, "ax"),
        (ok, "duplicate"),
        (r#"{"patient_id":"p2","lesions":[{"lesion_id":"l","label":7,"features":{"cc":[1,2],"mlo":[3,4]}}]}"#, "label"),
        ("not json", ""),
    ];
    for (bad, needle) in cases {
        let c = dir.path().join("c.jsonl");
        fs::write(&c, format!("{ok}\n{bad}\n")).unwrap();
        let err = load_dataset(&m, &c).unwrap_err();
        match &err {
            Error::Parse { line, message, .. } => {
                assert_eq!(*line, 2, "{err}");
                assert!(message.contains(needle), "{message} lacks {needle}");
            }
            other => panic!("expected a parse error, got {other}"),
        }
    }
}

#[test]
fn wrong_width_error_names_patient_lesion_and_view() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    fs::write(
        &m,
        r#"{"view_names":["arterial","venous"],"feature_width":3,"class_names":["a","b"],"task":"lesion"}"#,
    )
    .unwrap();
    let c = dir.path().join("c.jsonl");
    fs::write(
        &c,
        r#"{"patient_id":"p9","lesions":[{"lesion_id":"l4","label":0,"features":{"arterial":[1,2,3],"venous":[3,4]}}]}"#,
    )
    .unwrap();
    let msg = load_dataset(&m, &c).unwrap_err().to_string();
    assert!(msg.contains("p9") && msg.contains("l4") && msg.contains("venous"), "{msg}");
}

#[test]
fn split_properties_on_random_datasets() {
    let mut r = rng(200);
    for i in 0..200 {
        let patients = r.random_range(4..60);
        let classes = r.random_range(2..5);
        let spec = SyntheticSpec::random(patients, (1, 3), classes, 2, 2, 1.0, false, Task::Lesion, i);
        let ds = generate_synthetic(&spec).unwrap();
        let f = r.random_range(0.1..0.9);
        let (train, test) = split_by_patient(&ds, f, i).unwrap();
        let a: HashSet<&str> = train.cases.iter().map(|c| c.patient_id.as_str()).collect();
        let b: HashSet<&str> = test.cases.iter().map(|c| c.patient_id.as_str()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), patients);
        assert_eq!(test.len(), (f * patients as f64 + 1e-9).floor() as usize);
        let lesions: usize = train.lesion_count() + test.lesion_count();
        assert_eq!(lesions, ds.lesion_count(), "no patient's lesions straddle splits");

        let mut totals: BTreeMap<usize, usize> = BTreeMap::new();
        let mut in_test: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &ds.cases {
            *totals.entry(c.case_label()).or_default() += 1;
        }
        for c in &test.cases {
            *in_test.entry(c.case_label()).or_default() += 1;
        }
        for (k, &n) in &totals {
            if n >= 2 {
                let got = *in_test.get(k).unwrap_or(&0) as f64;
                assert!((got - f * n as f64).abs() <= 1.0 + 1e-9, "class {k}: {got} of {n} at f={f}");
            }
        }
        assert_eq!(split_by_patient(&ds, f, i).unwrap().1, test, "seeded split is reproducible");
    }
}

#[test]
fn split_examples_and_errors() {
    let spec = SyntheticSpec::random(10, (1, 2), 2, 2, 2, 1.0, false, Task::Lesion, 3);
    let ds = generate_synthetic(&spec).unwrap();
    assert_eq!(split_by_patient(&ds, 0.3, 0).unwrap().1.len(), 3);
    assert!(split_by_patient(&ds, 0.0, 0).is_err());
    assert!(split_by_patient(&ds, 1.0, 0).is_err());
}

#[test]
fn synthetic_generation_is_byte_deterministic() {
    let spec = SyntheticSpec::random(30, (1, 3), 2, 3, 4, 0.5, true, Task::Lesion, 9);
    let write = || {
        let ds = generate_synthetic(&spec).unwrap();
        let mut buf = Vec::new();
        giim::data::write_cases(&ds.manifest, &ds.cases, &mut buf).unwrap();
        buf
    };
    assert_eq!(write(), write());
}

#[test]
fn noiseless_prototypes_repeat_within_a_class() {
    let spec = SyntheticSpec::random(40, (1, 3), 3, 2, 3, 0.0, false, Task::Lesion, 1);
    let ds = generate_synthetic(&spec).unwrap();
    let mut seen: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for l in ds.cases.iter().flat_map(|c| &c.lesions) {
        for v in 0..2 {
            let f = l.features[v].as_ref().unwrap().data().to_vec();
            let key = l.label * 2 + v;
            assert_eq!(seen.entry(key).or_insert_with(|| f.clone()), &f);
        }
    }
}

#[test]
fn label_marginals_within_binomial_three_sigma() {
    let spec = SyntheticSpec::random(500, (1, 3), 2, 3, 4, 0.5, true, Task::Lesion, 21);
    let ds = generate_synthetic(&spec).unwrap();
    let n = ds.lesion_count() as f64;
    assert!(n >= 500.0);
    let sd = (n * 0.25).sqrt();
    for (_, k) in label_counts(&ds) {
        assert!((k as f64 - n / 2.0).abs() <= 3.0 * sd);
    }
}
