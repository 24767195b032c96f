use dest_core::config::ModelConfig;
use dest_core::numeric::Tensor;
use dest_core::pipeline::DestModel;
use dest_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 40;

fn model() -> DestModel {
    DestModel::new(&ModelConfig::default(), VOCAB, 3).unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn is_argument(e: Error) -> bool {
    matches!(e, Error::Argument(_))
}

#[test]
fn text_gets_a_classification_row() {
    let m = model();
    let out = m.encode_text(&[7, 8, 9, 10, 11]).unwrap();
    assert_eq!(out.shape(), &[6, 32]);
    assert_eq!(out, m.encode_text(&[7, 8, 9, 10, 11]).unwrap());
}

#[test]
fn text_limits() {
    let m = model();
    assert!(m.encode_text(&[8; 50]).is_ok());
    assert!(is_argument(m.encode_text(&[8; 51]).unwrap_err()));
    assert!(is_argument(m.encode_text(&[]).unwrap_err()));
    assert!(is_argument(m.encode_text(&[VOCAB as u32]).unwrap_err()));
}

#[test]
fn frames_encode_independently() {
    let m = model();
    let frames: Vec<Tensor> = (0..3).map(|i| random(4, 16, i)).collect();
    let out = m.encode_frames(&frames).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out.iter().all(|f| f.shape() == [5, 32]));
    let swapped = m.encode_frames(&[frames[2].clone(), frames[0].clone(), frames[1].clone()]).unwrap();
    assert_eq!(swapped[0], out[2]);
    assert_eq!(swapped[1], out[0]);
    assert_eq!(swapped[2], out[1]);
    assert_eq!(m.encode_frames(&frames[..1]).unwrap().len(), 1);
    assert!(m.encode_frames(&[]).is_err());
}

#[test]
fn video_adds_boundary_rows_and_depends_on_order() {
    let m = model();
    let e = random(3, 16, 5);
    let out = m.contextualize_video(&e).unwrap();
    assert_eq!(out.shape(), &[5, 32]);
    let reversed = e.select_rows(&[2, 1, 0]);
    let back = m.contextualize_video(&reversed).unwrap();
    let diff: f64 = out.data().iter().zip(back.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(diff > 1e-3, "reversal moved the output by only {diff}");
}

#[test]
fn video_limits() {
    let m = model();
    assert!(m.contextualize_video(&random(100, 16, 1)).is_ok());
    assert!(is_argument(m.contextualize_video(&random(101, 16, 1)).unwrap_err()));
    assert!(m.contextualize_video(&random(3, 15, 1)).is_err());
    assert!(m.contextualize_video(&Tensor::zeros(&[0, 16])).is_err());
}

#[test]
fn cross_keeps_text_rows_and_ignores_visual_order() {
    let m = model();
    let text = m.encode_text(&[7, 8, 9, 10, 11]).unwrap();
    let visual = random(20, 32, 9);
    for stream in [false, true] {
        let out = m.cross_encode(stream, &text, &visual).unwrap();
        assert_eq!(out.shape(), &[6, 32]);
        let order: Vec<usize> = (0..20).rev().collect();
        let permuted = m.cross_encode(stream, &text, &visual.select_rows(&order)).unwrap();
        assert!(out.max_abs_diff(&permuted) < 1e-6);
    }
    assert!(m.cross_encode(true, &text, &Tensor::zeros(&[0, 32])).is_err());
}

#[test]
fn answers_batch_like_single() {
    let m = model();
    let cands = vec![vec![7, 8], vec![9], vec![7, 8]];
    let z = m.encode_answers(&cands).unwrap();
    assert_eq!(z.len(), 3);
    assert!(z.iter().all(|v| v.len() == 32));
    assert_eq!(z[0], z[2]);
    for (c, batched) in cands.iter().zip(&z) {
        let single = m.encode_answers(std::slice::from_ref(c)).unwrap();
        let diff = single[0].iter().zip(batched).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }
    assert!(m.encode_answers(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cross_rows_follow_text(text_len in 1usize..8, visual_rows in 1usize..103, seed in 0u64..1000) {
        let m = model();
        let tokens: Vec<u32> = (0..text_len as u32).map(|i| 7 + i).collect();
        let text = m.encode_text(&tokens).unwrap();
        let out = m.cross_encode(seed % 2 == 0, &text, &random(visual_rows, 32, seed)).unwrap();
        prop_assert_eq!(out.rows(), text_len + 1);
        prop_assert!(out.is_finite());
    }
}
