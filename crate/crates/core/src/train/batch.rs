//! Batched forward passes for pre-training and question answering.

use std::collections::HashMap;
use std::ops::Range;

use crate::data::{QaSample, TrmSample};
use crate::error::Result;
use crate::numeric::{CeTarget, Graph, Tensor, Var};
use crate::pipeline::{Network, StreamInput, StreamMask};

use super::losses::contrastive;

/// Index of the best candidate for each row; ties resolve to the first.
pub fn predictions(logits: &Tensor, targets: &[CeTarget]) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .map(|(r, t)| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &c) in t.candidates.iter().enumerate() {
                if row[c] > row[t.candidates[best]] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn count_correct(logits: &Tensor, targets: &[CeTarget]) -> usize {
    predictions(logits, targets)
        .iter()
        .zip(targets)
        .filter(|(p, t)| **p == t.label)
        .count()
}

/// Nodes of a pre-training forward pass.
pub struct TrmForward {
    /// `B x A` scores against the batch's distinct candidate captions.
    pub logits: Var,
    pub targets: Vec<CeTarget>,
    /// Alignment loss over every clip/caption pair in the batch.
    pub align: Option<Var>,
}

/// Scores every sample's candidates through the video stream. With
/// `with_align`, also builds the clip/caption contrastive loss.
pub fn trm_forward(g: &mut Graph, net: &Network, samples: &[&TrmSample], with_align: bool) -> Result<TrmForward> {
    let b = samples.len();
    let mut texts: Vec<&[u32]> = samples.iter().map(|s| s.question.as_slice()).collect();
    // clip rows relative to each video's first feature row, and caption
    if with_align {
        for s in samples {
            for k in 0..s.num_clips() {
                texts.push(&s.captions[k]);
            }
        }
    }
    let question = net.question.forward(g, &texts)?;
    let items: Vec<StreamInput> = samples
        .iter()
        .map(|s| StreamInput {
            question: &s.question,
            frames: Vec::new(),
            video: &s.features,
        })
        .collect();
    let rep = net.fuse(g, question, &items, StreamMask::VL_ONLY)?;

    let mut distinct: Vec<&[u32]> = Vec::new();
    let mut column: HashMap<&[u32], usize> = HashMap::new();
    let mut targets = Vec::with_capacity(b);
    for s in samples {
        let candidates = s
            .candidates()
            .into_iter()
            .map(|c| {
                *column.entry(c).or_insert_with(|| {
                    distinct.push(c);
                    distinct.len() - 1
                })
            })
            .collect();
        targets.push(CeTarget {
            candidates,
            label: s.label,
        });
    }
    let z = net.encode_answers(g, &distinct)?;
    let logits = g.matmul_nt(rep.combined, z);

    let align = if with_align {
        let video = rep.video.as_ref().expect("video stream enabled");
        let mut clip_rows: Vec<Range<usize>> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let first = video.segments[i].start + 1;
            for w in s.clip_boundaries.windows(2) {
                clip_rows.push(first + w[0]..first + w[1]);
            }
        }
        let caption_rows: Vec<usize> = rep.question.first_rows()[b..].to_vec();
        let f_v = g.segment_mean(video.rows, clip_rows);
        let f_c = g.gather(rep.question.rows, caption_rows);
        let pv = net.align_video.forward(g, f_v);
        let pv = g.l2_normalize(pv);
        let pc = net.align_caption.forward(g, f_c);
        let pc = g.l2_normalize(pc);
        let log_temp = g.param(net.log_temp);
        Some(contrastive(g, pv, pc, log_temp))
    } else {
        None
    };
    Ok(TrmForward {
        logits,
        targets,
        align,
    })
}

/// Scores `items` against every row of `answers` (`A x D`); `B x A`.
pub fn qa_logits(g: &mut Graph, net: &Network, items: &[StreamInput], answers: Var, mask: StreamMask) -> Result<Var> {
    let rep = net.represent(g, items, mask)?;
    Ok(g.matmul_nt(rep.combined, answers))
}

/// Inputs for QA samples given each sample's chosen frame indices.
pub fn qa_inputs<'a>(samples: &[&'a QaSample], frames: &[Vec<usize>]) -> Vec<StreamInput<'a>> {
    samples
        .iter()
        .zip(frames)
        .map(|(s, idx)| StreamInput {
            question: &s.question,
            frames: idx.iter().map(|&i| &s.frames[i]).collect(),
            video: &s.features,
        })
        .collect()
}
