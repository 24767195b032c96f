//! Independent label checks that re-derive answers from recorded ground
//! truth instead of trusting the generator.

use super::io::TrmRecord;
use super::tokens;
use super::trm::Template;
use super::world::EventVocab;
use crate::numeric::Tensor;

/// Re-derives the answer caption of a pre-training record from its
/// template, question tokens and clip captions. Returns a reason on
/// mismatch.
pub fn verify_trm_record(rec: &TrmRecord) -> Result<(), String> {
    let caps = &rec.caption_token_ids;
    let k = rec.clip_boundaries.len().saturating_sub(1);
    if rec.candidate_indices.iter().any(|&i| i >= caps.len()) {
        return Err("candidate index out of range".into());
    }
    let Some(&chosen) = rec.candidate_indices.get(rec.label) else {
        return Err("label out of range".into());
    };
    let q = &rec.question_token_ids;
    if q.len() < 2 || q[0] != tokens::WHAT || q[1] != tokens::HAPPENS {
        return Err("unrecognised question prefix".into());
    }
    let expected_answer: &[u32] = match rec.template {
        Template::What => {
            if k != 1 || q.len() != 2 {
                return Err("what item must have one clip and no reference".into());
            }
            &caps[0]
        }
        Template::Begin | Template::End => {
            let marker = if rec.template == Template::Begin { tokens::BEGIN } else { tokens::END };
            if q.len() != 3 || q[2] != marker || caps.len() != k {
                return Err("malformed begin/end question".into());
            }
            if rec.candidate_indices.len() != k {
                return Err("begin/end must offer every caption".into());
            }
            if rec.template == Template::Begin { &caps[0] } else { &caps[k - 1] }
        }
        Template::Before | Template::After => {
            let marker = if rec.template == Template::After { tokens::AFTER } else { tokens::BEFORE };
            if q.len() < 4 || q[2] != marker || caps.len() != k {
                return Err("malformed before/after question".into());
            }
            let reference = &q[3..];
            let positions: Vec<usize> = (0..k).filter(|&j| caps[j] == reference).collect();
            let [r] = positions[..] else {
                return Err("referenced caption not found exactly once".into());
            };
            if rec.candidate_indices.iter().any(|&i| caps[i] == reference) {
                return Err("candidates contain the referenced caption".into());
            }
            let target = if rec.template == Template::After { r + 1 } else { r.wrapping_sub(1) };
            if target >= k {
                return Err("reference has no neighbour in that direction".into());
            }
            &caps[target]
        }
    };
    let cands: Vec<&Vec<u32>> = rec.candidate_indices.iter().map(|&i| &caps[i]).collect();
    for (i, a) in cands.iter().enumerate() {
        if cands[..i].contains(a) {
            return Err("duplicate candidates".into());
        }
    }
    if caps[chosen] != expected_answer {
        return Err(format!("label points at {:?}, expected {:?}", caps[chosen], expected_answer));
    }
    Ok(())
}

/// Events recovered from raw features by nearest signature to each
/// clip's mean row.
pub fn decode_events(vocab: &EventVocab, features: &Tensor, boundaries: &[usize]) -> Vec<usize> {
    boundaries
        .windows(2)
        .map(|w| {
            let h = features.cols();
            let mut mean = vec![0.0; h];
            for r in w[0]..w[1] {
                for (m, v) in mean.iter_mut().zip(features.row(r)) {
                    *m += v / (w[1] - w[0]) as f64;
                }
            }
            (0..vocab.event_count())
                .min_by(|&a, &b| {
                    let da: f64 = vocab.signatures[a].iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = vocab.signatures[b].iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .expect("non-empty vocabulary")
        })
        .collect()
}
