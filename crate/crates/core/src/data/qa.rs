//! Downstream question answering over the event world: temporal questions
//! about event order and spatial questions about the scene attribute.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{gen_distinct_clips, synthesize_sequence};
use super::tokens;
use super::trm::{question_tokens, Template};
use super::world::{gen_frame, EventVocab};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Temporal,
    Spatial,
}

impl QuestionType {
    pub const ALL: [QuestionType; 2] = [QuestionType::Temporal, QuestionType::Spatial];

    pub fn name(&self) -> &'static str {
        match self {
            QuestionType::Temporal => "temporal",
            QuestionType::Spatial => "spatial",
        }
    }
}

/// Question family within a type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaKind {
    After,
    First,
    Last,
    Attribute,
}

impl QaKind {
    pub fn question_type(&self) -> QuestionType {
        match self {
            QaKind::Attribute => QuestionType::Spatial,
            _ => QuestionType::Temporal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaSample {
    pub id: u64,
    pub kind: QaKind,
    /// `M x H` feature rows.
    pub features: Tensor,
    pub clip_boundaries: Vec<usize>,
    pub captions: Vec<Vec<u32>>,
    pub attribute_id: usize,
    /// One `N x patch_size` frame per feature row.
    pub frames: Vec<Tensor>,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

impl QaSample {
    pub fn question_type(&self) -> QuestionType {
        self.kind.question_type()
    }
}

pub fn spatial_question() -> Vec<u32> {
    vec![tokens::WHAT, tokens::ATTRIBUTE_Q]
}

/// Sample `index`: even indices are temporal, odd are spatial.
pub fn gen_qa_sample(vocab: &EventVocab, k: usize, max_len: usize, index: u64, rng: &mut impl Rng) -> Result<QaSample> {
    let clips = gen_distinct_clips(vocab, k, rng)?;
    let attribute_id = rng.gen_range(0..vocab.attribute_count());
    let (features, mut manifest) = synthesize_sequence(&clips, max_len)?;
    manifest.attribute_ids.iter_mut().for_each(|a| *a = attribute_id);
    let frames = (0..features.rows()).map(|_| gen_frame(vocab, attribute_id, rng)).collect();
    let captions = manifest.captions;
    let (kind, question, answer) = if index % 2 == 0 {
        match rng.gen_range(0..3) {
            0 => {
                let r = rng.gen_range(0..k - 1);
                (
                    QaKind::After,
                    question_tokens(Template::After, Some(&captions[r])),
                    captions[r + 1].clone(),
                )
            }
            1 => (QaKind::First, question_tokens(Template::Begin, None), captions[0].clone()),
            _ => (QaKind::Last, question_tokens(Template::End, None), captions[k - 1].clone()),
        }
    } else {
        (
            QaKind::Attribute,
            spatial_question(),
            vec![tokens::attribute(&vocab.world, attribute_id)],
        )
    };
    Ok(QaSample {
        id: index,
        kind,
        features,
        clip_boundaries: manifest.boundaries,
        captions,
        attribute_id,
        frames,
        question,
        answer,
    })
}

/// `size` samples, half temporal and half spatial. Sample `i` depends
/// only on `(seed, i)`.
pub fn gen_downstream_dataset(vocab: &EventVocab, k: usize, max_len: usize, size: usize, seed: u64) -> Result<Vec<QaSample>> {
    if size == 0 {
        return Err(Error::argument("dataset size must be positive"));
    }
    (0..size as u64)
        .map(|i| gen_qa_sample(vocab, k, max_len, i, &mut crate::rng::indexed(seed, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn vocab() -> EventVocab {
        EventVocab::generate(&WorldConfig::default(), &ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn types_are_balanced() {
        let v = vocab();
        let ds = gen_downstream_dataset(&v, 4, 100, 1000, 7).unwrap();
        let temporal = ds.iter().filter(|s| s.question_type() == QuestionType::Temporal).count();
        assert!((499..=501).contains(&temporal));
    }

    #[test]
    fn majority_answer_is_near_chance() {
        let v = vocab();
        let ds = gen_downstream_dataset(&v, 4, 100, 2000, 8).unwrap();
        let mut counts: HashMap<&[u32], usize> = HashMap::new();
        for s in &ds {
            *counts.entry(&s.answer).or_default() += 1;
        }
        let majority = *counts.values().max().unwrap() as f64 / ds.len() as f64;
        let chance = 1.0 / counts.len() as f64;
        assert!(majority <= chance + 0.05, "majority {majority}, chance {chance}");
    }

    #[test]
    fn dataset_is_seeded() {
        let v = vocab();
        let a = gen_downstream_dataset(&v, 4, 100, 20, 3).unwrap();
        let b = gen_downstream_dataset(&v, 4, 100, 20, 3).unwrap();
        assert_eq!(a, b);
        assert!(gen_downstream_dataset(&v, 4, 100, 0, 3).is_err());
    }
}
