//! Temporal referring samples: questions about absolute and relative
//! positions of events inside a concatenated sequence.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{concat_clips, gen_distinct_clips, synthesize_sequence, Manifest};
use super::tokens;
use super::world::{gen_clip, EventVocab};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

const DISTRACTOR_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    What,
    Begin,
    End,
    Before,
    After,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::What,
        Template::Begin,
        Template::End,
        Template::Before,
        Template::After,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Template::What => "what",
            Template::Begin => "begin",
            Template::End => "end",
            Template::Before => "before",
            Template::After => "after",
        }
    }
}

/// One pre-training item.
#[derive(Clone, Debug, PartialEq)]
pub struct TrmSample {
    pub id: u64,
    pub template: Template,
    /// `M x H` feature rows.
    pub features: Tensor,
    pub clip_boundaries: Vec<usize>,
    /// Per-clip captions in temporal order. For `what` items the first
    /// entry is the true caption and the rest are distractors.
    pub captions: Vec<Vec<u32>>,
    /// Candidate answers as indices into `captions`.
    pub candidate_indices: Vec<usize>,
    /// Position of the correct answer in `candidate_indices`.
    pub label: usize,
    pub question: Vec<u32>,
}

impl TrmSample {
    pub fn candidates(&self) -> Vec<&[u32]> {
        self.candidate_indices
            .iter()
            .map(|&i| self.captions[i].as_slice())
            .collect()
    }

    pub fn answer(&self) -> &[u32] {
        &self.captions[self.candidate_indices[self.label]]
    }

    /// Number of clips in the video.
    pub fn num_clips(&self) -> usize {
        self.clip_boundaries.len() - 1
    }
}

pub fn question_tokens(template: Template, reference: Option<&[u32]>) -> Vec<u32> {
    let mut q = vec![tokens::WHAT, tokens::HAPPENS];
    match template {
        Template::What => {}
        Template::Begin => q.push(tokens::BEGIN),
        Template::End => q.push(tokens::END),
        Template::Before => q.push(tokens::BEFORE),
        Template::After => q.push(tokens::AFTER),
    }
    if let Some(r) = reference {
        q.extend_from_slice(r);
    }
    q
}

fn all_distinct(items: &[Vec<u32>]) -> bool {
    items.iter().enumerate().all(|(i, a)| items[..i].iter().all(|b| a != b))
}

/// Builds the question, candidates and label for `template` over a
/// sequence described by `manifest`.
///
/// Multi-clip templates need at least two clips with pairwise-distinct
/// captions. `what` needs a single clip; its `num_candidates - 1`
/// distractors are drawn from `pool`.
pub fn gen_trm_sample(
    id: u64,
    features: Tensor,
    manifest: &Manifest,
    template: Template,
    num_candidates: usize,
    pool: &[Vec<u32>],
    rng: &mut impl Rng,
) -> Result<TrmSample> {
    let k = manifest.len();
    let mut captions = manifest.captions.clone();
    let (question, candidate_indices, label) = match template {
        Template::What => {
            if k != 1 {
                return Err(Error::argument("the what template takes a single-clip video"));
            }
            if num_candidates == 0 {
                return Err(Error::argument("need at least one candidate"));
            }
            for _ in 1..num_candidates {
                let mut placed = false;
                for _ in 0..DISTRACTOR_ATTEMPTS {
                    let c = pool
                        .choose(rng)
                        .ok_or_else(|| Error::argument("empty distractor pool"))?;
                    if !captions.contains(c) {
                        captions.push(c.clone());
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(Error::argument(format!(
                        "no distinct distractor after {DISTRACTOR_ATTEMPTS} attempts"
                    )));
                }
            }
            let mut order: Vec<usize> = (0..captions.len()).collect();
            order.shuffle(rng);
            let label = order.iter().position(|&i| i == 0).expect("true caption present");
            (question_tokens(template, None), order, label)
        }
        _ => {
            if k < 2 {
                return Err(Error::argument(format!("{} needs at least two clips", template.name())));
            }
            if !all_distinct(&captions) {
                return Err(Error::argument("duplicate captions in one sequence"));
            }
            match template {
                Template::Begin => (question_tokens(template, None), (0..k).collect(), 0),
                Template::End => (question_tokens(template, None), (0..k).collect(), k - 1),
                Template::After | Template::Before => {
                    // reference clip, 0-based; the answer is its neighbour
                    let (reference, answer) = if template == Template::After {
                        let r = rng.gen_range(0..k - 1);
                        (r, r + 1)
                    } else {
                        let r = rng.gen_range(1..k);
                        (r, r - 1)
                    };
                    let cands: Vec<usize> = (0..k).filter(|&j| j != reference).collect();
                    let label = cands.iter().position(|&j| j == answer).expect("neighbour present");
                    (question_tokens(template, Some(&captions[reference])), cands, label)
                }
                Template::What => unreachable!(),
            }
        }
    };
    Ok(TrmSample {
        id,
        template,
        features,
        clip_boundaries: manifest.boundaries.clone(),
        captions,
        candidate_indices,
        label,
        question,
    })
}

/// Generates one complete sample: clips, sequence and question.
pub fn gen_trm_item(
    vocab: &EventVocab,
    k: usize,
    max_len: usize,
    id: u64,
    template: Template,
    rng: &mut impl Rng,
) -> Result<TrmSample> {
    let (features, manifest) = if template == Template::What {
        let e = rng.gen_range(0..vocab.event_count());
        let clip = gen_clip(vocab, e, rng)?;
        concat_clips(&[clip], max_len)?
    } else {
        let clips = gen_distinct_clips(vocab, k, rng)?;
        synthesize_sequence(&clips, max_len)?
    };
    gen_trm_sample(id, features, &manifest, template, k, &vocab.captions, rng)
}

/// `size` samples with uniformly drawn templates. Sample `i` depends only
/// on `(seed, i)`.
pub fn gen_trm_dataset(
    vocab: &EventVocab,
    k: usize,
    max_len: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<TrmSample>> {
    (0..size as u64)
        .map(|i| {
            let mut rng = crate::rng::indexed(seed, i);
            let template = Template::ALL[rng.gen_range(0..Template::ALL.len())];
            gen_trm_item(vocab, k, max_len, i, template, &mut rng)
        })
        .collect()
}
