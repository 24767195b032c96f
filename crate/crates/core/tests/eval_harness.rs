mod common;

use std::sync::OnceLock;

use dest_core::config::RunConfig;
use dest_core::data::{gen_trm_dataset, QaSample, Template, TrmSample};
use dest_core::eval::{
    answer_upper_bound, evaluate, evaluate_with, shuffle_report, stream_ablation, EvalOptions, EvalReport,
    OraclePredictor, Permutation, RandomPredictor, Samples, TypeAccuracy,
};
use dest_core::pipeline::StreamMask;
use dest_core::run::{self, Splits};
use dest_core::train::Checkpoint;
use dest_core::Error;
use proptest::prelude::*;

struct Fixture {
    cfg: RunConfig,
    trm: Splits<TrmSample>,
    qa: Splits<QaSample>,
    finetuned: Checkpoint,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = common::small_run();
        let world = run::world(&cfg).unwrap();
        let trm = run::trm_splits(&cfg, &world).unwrap();
        let qa = run::qa_splits(&cfg, &world).unwrap();
        let (finetuned, _) = run::finetune_run(&cfg, None, &qa.train, StreamMask::BOTH).unwrap();
        Fixture { cfg, trm, qa, finetuned }
    })
}

fn vl() -> EvalOptions {
    EvalOptions {
        mask: StreamMask::VL_ONLY,
        ..EvalOptions::default()
    }
}

#[test]
fn oracle_is_perfect() {
    let f = fixture();
    let r = evaluate_with(&OraclePredictor, Samples::Trm(&f.trm.test), &[], 1, &vl(), &f.cfg).unwrap();
    assert_eq!(r.accuracy(), 1.0);
    assert_eq!(r.n(), f.trm.test.len());

    let answers: Vec<Vec<u32>> = f.qa.test.iter().map(|s| s.answer.clone()).collect();
    let r = evaluate_with(&OraclePredictor, Samples::Qa(&f.qa.test), &answers, 2, &EvalOptions::default(), &f.cfg).unwrap();
    assert_eq!(r.accuracy(), 1.0);
}

#[test]
fn random_predictor_sits_at_chance() {
    let f = fixture();
    let world = run::world(&f.cfg).unwrap();
    let samples = gen_trm_dataset(&world, 4, f.cfg.model.max_video_length, 15_000, 5).unwrap();
    let r = evaluate_with(&RandomPredictor { seed: 9 }, Samples::Trm(&samples), &[], 1, &vl(), &f.cfg).unwrap();
    for (template, chance) in [(Template::Before, 1.0 / 3.0), (Template::After, 1.0 / 3.0), (Template::Begin, 0.25), (Template::End, 0.25)] {
        let acc = r.type_accuracy(template.name()).unwrap();
        assert!((acc - chance).abs() < 0.02, "{}: {acc}", template.name());
    }
}

#[test]
fn identity_permutation_and_repeats_match() {
    let f = fixture();
    let normal = evaluate(&f.finetuned, Samples::Qa(&f.qa.test), &f.cfg, &EvalOptions::default()).unwrap();
    let again = evaluate(&f.finetuned, Samples::Qa(&f.qa.test), &f.cfg, &EvalOptions::default()).unwrap();
    assert_eq!(normal.csv(), again.csv());
    assert_eq!(normal.table(), again.table());

    let identity = Permutation::Normal.order(7, 3);
    assert_eq!(identity, (0..7).collect::<Vec<_>>());
    let shuffled = EvalOptions {
        permutation: Permutation::Shuffled(4),
        ..EvalOptions::default()
    };
    let a = evaluate(&f.finetuned, Samples::Qa(&f.qa.test), &f.cfg, &shuffled).unwrap();
    let b = evaluate(&f.finetuned, Samples::Qa(&f.qa.test), &f.cfg, &shuffled).unwrap();
    assert_eq!(a.csv(), b.csv());
}

#[test]
fn mismatched_data_is_refused_with_keys() {
    let f = fixture();
    let mut other = f.cfg.clone();
    other.world.event_count += 1;
    other.seed += 1;
    match evaluate(&f.finetuned, Samples::Qa(&f.qa.test), &other, &EvalOptions::default()) {
        Err(Error::Config(msg)) => {
            assert!(msg.contains("event_count"), "{msg}");
            assert!(msg.contains("seed"), "{msg}");
        }
        other => panic!("expected a config error, got {other:?}"),
    }

    let mut k = f.cfg.clone();
    k.world.num_videos_k = 3;
    assert!(evaluate(&f.finetuned, Samples::Qa(&f.qa.test), &k, &EvalOptions::default()).is_ok());
}

#[test]
fn trm_data_needs_the_video_stream() {
    let f = fixture();
    assert!(evaluate(&f.finetuned, Samples::Trm(&f.trm.test), &f.cfg, &EvalOptions::default()).is_err());
    assert!(evaluate(&f.finetuned, Samples::Trm(&f.trm.test), &f.cfg, &vl()).is_ok());
}

#[test]
fn ablation_matches_direct_evaluation() {
    let f = fixture();
    let reports = stream_ablation(&f.finetuned, &f.qa.test, &f.cfg, "test").unwrap();
    assert_eq!(reports.len(), 3);
    let both = evaluate(&f.finetuned, Samples::Qa(&f.qa.test), &f.cfg, &EvalOptions::default()).unwrap();
    assert_eq!(reports[0].csv(), both.csv());
    for (r, mask) in reports.iter().zip([StreamMask::BOTH, StreamMask::IL_ONLY, StreamMask::VL_ONLY]) {
        assert_eq!(r.streams, mask.label());
    }
}

#[test]
fn image_stream_logits_ignore_the_video_stream() {
    let f = fixture();
    let m = &f.finetuned.model;
    let answers = &f.finetuned.header.answer_vocab;
    let z = m.encode_answers(answers).unwrap();
    for s in f.qa.test.iter().take(5) {
        let frames = &s.frames[..2];
        let both = m.forward(&s.question, frames, &s.features, answers, StreamMask::BOTH).unwrap();
        let il = m.forward(&s.question, frames, &s.features, answers, StreamMask::IL_ONLY).unwrap();
        assert_eq!(il.r, both.r);
        for (logit, za) in il.logits.iter().zip(&z) {
            let dot: f64 = both.r.iter().zip(za).map(|(a, b)| a * b).sum();
            assert!((logit - dot).abs() < 1e-9);
        }
    }
}

#[test]
fn upper_bound_examples() {
    let f = fixture();
    let doubled: Vec<QaSample> = f.qa.train.iter().chain(&f.qa.train).cloned().collect();
    for b in answer_upper_bound(&doubled, &f.qa.train).unwrap() {
        assert_eq!(b.fraction, 1.0, "{}", b.question_type);
    }
    let unseen: Vec<QaSample> = f
        .qa
        .test
        .iter()
        .cloned()
        .map(|mut s| {
            s.answer = vec![u32::MAX];
            s
        })
        .collect();
    for b in answer_upper_bound(&f.qa.train, &unseen).unwrap() {
        assert_eq!(b.fraction, 0.0);
    }
}

#[test]
fn upper_bound_dominates_model() {
    let f = fixture();
    let bounds = answer_upper_bound(&f.qa.train, &f.qa.test).unwrap();
    for r in stream_ablation(&f.finetuned, &f.qa.test, &f.cfg, "test").unwrap() {
        for b in &bounds {
            assert!(r.type_accuracy(&b.question_type).unwrap() <= b.fraction + 1e-12);
        }
    }
}

#[test]
fn shuffle_report_drop_is_signed_difference() {
    let f = fixture();
    let sr = shuffle_report(&f.finetuned, Samples::Qa(&f.qa.test), &f.cfg, 3, &EvalOptions::default()).unwrap();
    assert_eq!(sr.shuffled.len(), 3);
    assert_eq!(sr.rows.last().unwrap().question_type, "all");
    for row in &sr.rows {
        let mean = sr
            .shuffled
            .iter()
            .map(|r| r.type_accuracy(&row.question_type).unwrap_or_else(|| r.accuracy()))
            .sum::<f64>()
            / 3.0;
        assert!((row.shuffled_mean - mean).abs() < 1e-12);
        assert!((row.drop - (row.normal - row.shuffled_mean)).abs() < 1e-12);
    }
}

fn report(counts: &[(usize, usize)]) -> EvalReport {
    EvalReport {
        split: "test".into(),
        permutation: Permutation::Normal,
        streams: "both".into(),
        per_type: counts
            .iter()
            .enumerate()
            .map(|(i, &(correct, n))| TypeAccuracy {
                question_type: format!("t{i}"),
                correct: correct.min(n),
                n,
            })
            .collect(),
        config: serde_json::Value::Null,
        seed: 0,
    }
}

proptest! {
    #[test]
    fn report_totals_are_consistent(counts in prop::collection::vec((0usize..50, 1usize..50), 1..6)) {
        let r = report(&counts);
        let n: usize = r.per_type.iter().map(|t| t.n).sum();
        prop_assert_eq!(r.n(), n);
        prop_assert!((0.0..=1.0).contains(&r.accuracy()));
        let weighted: f64 = r.per_type.iter().map(|t| t.accuracy() * t.n as f64).sum::<f64>() / n as f64;
        prop_assert!((weighted - r.accuracy()).abs() < 1e-9);
        let csv = r.csv();
        let lines: Vec<&str> = csv.lines().collect();
        prop_assert_eq!(lines[0], EvalReport::CSV_HEADER);
        prop_assert_eq!(lines.len(), counts.len() + 2);
    }
}
