//! Finite-difference check of the complete model at tiny dimensions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LossCombination, ModelConfig, WorldConfig};
use crate::data::{gen_downstream_dataset, gen_trm_dataset, tokens, EventVocab, QaSample, TrmSample};
use crate::error::Result;
use crate::numeric::{grad_check, CeTarget, GradCheckReport};
use crate::pipeline::{sample_frames, DestModel, SampleMode, StreamMask};

use super::batch::{qa_inputs, qa_logits, trm_forward};
use super::losses::combine_losses;

/// Relative error bound for the tiny check.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Width 8, one layer, two heads, two patches, four-wide features and
/// patches.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        embedding_size: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden_size: 8,
        num_patches: 2,
        patch_size: 4,
        video_feature_size: 4,
        dropout: 0.0,
        attention_dropout: 0.0,
        max_video_length: 3,
        max_question_length: 8,
        ..ModelConfig::default()
    }
}

/// Single-row clips so a three-clip video has three rows.
pub fn tiny_world() -> WorldConfig {
    WorldConfig {
        event_count: 4,
        attribute_count: 2,
        caption_length: 1,
        duration_min: 1,
        duration_max: 1,
        num_videos_k: 3,
        ..WorldConfig::default()
    }
}

/// Checks every parameter against central differences of one loss that
/// touches all of them: pre-training cross-entropy over three-clip videos
/// and the alignment loss, plus question answering through both streams
/// with two frames and three candidates, combined with learned weights.
/// Parameters are re-drawn at `scale` away from initialization symmetry.
pub fn tiny_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let world = tiny_world();
    let cfg = tiny_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = EventVocab::generate(&world, &cfg, &mut rng)?;
    let trm: Vec<TrmSample> = gen_trm_dataset(&vocab, 3, cfg.max_video_length, 3, seed)?;
    let qa: Vec<QaSample> = gen_downstream_dataset(&vocab, 3, cfg.max_video_length, 2, seed)?;
    let mut model = DestModel::new(&cfg, tokens::vocab_size(&world), seed)?;
    model.params.randomize(0.3, &mut rng);
    let net = model.net.clone();

    let trm_refs: Vec<&TrmSample> = trm.iter().collect();
    let qa_refs: Vec<&QaSample> = qa.iter().collect();
    let frames: Vec<Vec<usize>> = qa
        .iter()
        .map(|s| sample_frames(s.frames.len(), 2, SampleMode::Eval, &mut rng))
        .collect();
    let mut answers: Vec<Vec<u32>> = qa.iter().map(|s| s.answer.clone()).collect();
    for c in &vocab.captions {
        if answers.len() == 3 {
            break;
        }
        if !answers.contains(c) {
            answers.push(c.clone());
        }
    }
    answers.dedup();
    let answer_refs: Vec<&[u32]> = answers.iter().map(|a| a.as_slice()).collect();
    let qa_targets: Vec<CeTarget> = qa
        .iter()
        .map(|s| CeTarget {
            candidates: (0..answers.len()).collect(),
            label: answers.iter().position(|a| *a == s.answer).expect("answer listed"),
        })
        .collect();

    grad_check(&mut model.params, GRADCHECK_TOL, None, |g| {
        let fw = trm_forward(g, &net, &trm_refs, true)?;
        let l_trm = g.cross_entropy(fw.logits, fw.targets.clone());
        let z = net.encode_answers(g, &answer_refs)?;
        let items = qa_inputs(&qa_refs, &frames);
        let logits = qa_logits(g, &net, &items, z, StreamMask::BOTH)?;
        let l_qa = g.cross_entropy(logits, qa_targets.clone());
        let task = g.add(l_trm, l_qa);
        let s1 = g.param(net.loss_s1);
        let s2 = g.param(net.loss_s2);
        Ok(combine_losses(g, task, fw.align.expect("alignment requested"), LossCombination::Uncertainty, s1, s2))
    })
}
