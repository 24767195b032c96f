mod common;

use dest_core::data::io::{decode_qa, decode_trm, encode_qa, encode_trm, parse_trm_manifest, dataset_paths};
use dest_core::data::verify::verify_trm_record;
use dest_core::data::{gen_downstream_dataset, gen_trm_dataset, QuestionType};
use dest_core::run::{self, load_dataset, save_dataset, Dataset, Task};
use dest_core::Error;
use proptest::prelude::*;

#[test]
fn datasets_round_trip_through_files() {
    let cfg = common::small_run();
    let world = run::world(&cfg).unwrap();
    let trm = run::trm_splits(&cfg, &world).unwrap();
    let qa = run::qa_splits(&cfg, &world).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (data, name) in [(Dataset::Trm(trm.test), "trm_test"), (Dataset::Qa(qa.test), "qa_test")] {
        let stem = dir.path().join(name);
        save_dataset(&data, "test", &cfg, &stem).unwrap();
        let (info, back) = load_dataset(&stem).unwrap();
        assert_eq!(back, data);
        assert_eq!(info.task, data.task());
        assert_eq!(info.split, "test");
        assert_eq!(info.config, cfg);
    }
    assert_eq!(load_dataset(&dir.path().join("trm_test")).unwrap().0.task, Task::Trm);
}

#[test]
fn generation_is_a_pure_function_of_seed() {
    let cfg = common::small_run();
    let world = run::world(&cfg).unwrap();
    let a = encode_trm(&gen_trm_dataset(&world, 4, 100, 300, 17).unwrap());
    let b = encode_trm(&gen_trm_dataset(&world, 4, 100, 300, 17).unwrap());
    assert_eq!(a, b);
    let c = encode_trm(&gen_trm_dataset(&world, 4, 100, 300, 18).unwrap());
    assert_ne!(a.1, c.1);
    assert_eq!(encode_qa(&run::qa_splits(&cfg, &world).unwrap().train), encode_qa(&run::qa_splits(&cfg, &world).unwrap().train));
}

#[test]
fn bad_blobs_are_format_errors() {
    let cfg = common::small_run();
    let world = run::world(&cfg).unwrap();
    let (manifest, blob) = encode_trm(&gen_trm_dataset(&world, 4, 100, 20, 1).unwrap());
    let mut wrong = blob.clone();
    wrong[0] = b'X';
    match decode_trm(&manifest, &wrong) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected a format error, got {:?}", other.map(|v| v.len())),
    }
    for cut in [3, 10, blob.len() / 2, blob.len() - 1] {
        assert!(matches!(decode_trm(&manifest, &blob[..cut]), Err(Error::Format { .. })), "cut at {cut}");
    }
    assert!(decode_trm("{not json", &blob).is_err());

    let (qm, qb) = encode_qa(&gen_downstream_dataset(&world, 4, 100, 10, 1).unwrap());
    assert!(matches!(decode_qa(&qm, &qb[..qb.len() - 4]), Err(Error::Format { .. })));
    assert_eq!(decode_qa(&qm, &qb).unwrap().len(), 10);
}

#[test]
fn truncated_files_fail_to_load() {
    let cfg = common::small_run();
    let world = run::world(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("qa");
    let data = Dataset::Qa(gen_downstream_dataset(&world, 4, 100, 10, 2).unwrap());
    save_dataset(&data, "train", &cfg, &stem).unwrap();
    let (_, blob_path) = dataset_paths(&stem);
    let blob = std::fs::read(&blob_path).unwrap();
    std::fs::write(&blob_path, &blob[..blob.len() - 7]).unwrap();
    assert!(matches!(load_dataset(&stem), Err(Error::Format { .. })));
}

#[test]
fn manifest_rows_match_blob() {
    let cfg = common::small_run();
    let world = run::world(&cfg).unwrap();
    let samples = gen_trm_dataset(&world, 5, 12, 200, 3).unwrap();
    let (manifest, _) = encode_trm(&samples);
    for (rec, s) in parse_trm_manifest(&manifest).unwrap().iter().zip(&samples) {
        assert_eq!(*rec.clip_boundaries.last().unwrap(), s.features.rows());
        assert!(s.features.rows() <= 12);
        assert!(rec.clip_boundaries.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn downstream_types_are_balanced() {
    let cfg = common::small_run();
    let world = run::world(&cfg).unwrap();
    let qa = gen_downstream_dataset(&world, 4, 100, 1000, 4).unwrap();
    let temporal = qa.iter().filter(|s| s.question_type() == QuestionType::Temporal).count();
    assert!((499..=501).contains(&temporal), "{temporal}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_label_survives_the_oracle(k in 2usize..9, seed in 0u64..10_000) {
        let cfg = common::small_run();
        let world = run::world(&cfg).unwrap();
        let samples = gen_trm_dataset(&world, k, 100, 150, seed).unwrap();
        let (manifest, blob) = encode_trm(&samples);
        for rec in parse_trm_manifest(&manifest).unwrap() {
            prop_assert_eq!(verify_trm_record(&rec), Ok(()));
        }
        prop_assert_eq!(decode_trm(&manifest, &blob).unwrap(), samples);
    }
}
