use std::collections::HashMap;

use rand::Rng;
use serde_json::json;

use super::report::{EvalReport, Permutation, TypeAccuracy};
use crate::config::{json_diff, RunConfig};
use crate::data::{QaSample, QuestionType, Template, TrmSample};
use crate::error::{Error, Result};
use crate::numeric::{CeTarget, Graph, Tensor};
use crate::pipeline::{sample_frames, DestModel, SampleMode, StreamInput, StreamMask};
use crate::rng::indexed;
use crate::train::batch::predictions;
use crate::train::Checkpoint;

const EVAL_BATCH: usize = 64;

/// A dataset to evaluate on.
#[derive(Clone, Copy, Debug)]
pub enum Samples<'a> {
    Trm(&'a [TrmSample]),
    Qa(&'a [QaSample]),
}

impl<'a> Samples<'a> {
    pub fn len(&self) -> usize {
        match self {
            Samples::Trm(s) => s.len(),
            Samples::Qa(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn type_names(&self) -> Vec<&'static str> {
        match self {
            Samples::Trm(_) => Template::ALL.iter().map(|t| t.name()).collect(),
            Samples::Qa(_) => QuestionType::ALL.iter().map(|t| t.name()).collect(),
        }
    }

    /// One item per sample. Pre-training items carry no frames and choose
    /// among their own candidates; question-answering items choose among
    /// `answers`, with no label when the answer is outside it.
    pub fn items(&self, answers: &'a [Vec<u32>], permutation: Permutation, num_frames: usize) -> Vec<EvalItem<'a>> {
        match self {
            Samples::Trm(samples) => samples
                .iter()
                .map(|s| EvalItem {
                    id: s.id,
                    question_type: s.template.name(),
                    question: &s.question,
                    video: permutation.apply(&s.features, s.id),
                    frames: Vec::new(),
                    candidates: s.candidates(),
                    label: Some(s.label),
                })
                .collect(),
            Samples::Qa(samples) => {
                let index: HashMap<&[u32], usize> =
                    answers.iter().enumerate().map(|(i, a)| (a.as_slice(), i)).collect();
                let candidates: Vec<&[u32]> = answers.iter().map(|a| a.as_slice()).collect();
                samples
                    .iter()
                    .map(|s| {
                        // evaluation sampling is deterministic; the generator is unused
                        let chosen = sample_frames(s.frames.len(), num_frames, SampleMode::Eval, &mut indexed(0, 0));
                        EvalItem {
                            id: s.id,
                            question_type: s.question_type().name(),
                            question: &s.question,
                            video: permutation.apply(&s.features, s.id),
                            frames: chosen.iter().map(|&i| &s.frames[i]).collect(),
                            candidates: candidates.clone(),
                            label: index.get(s.answer.as_slice()).copied(),
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalItem<'a> {
    pub id: u64,
    pub question_type: &'static str,
    pub question: &'a [u32],
    /// Feature rows after the permutation.
    pub video: Tensor,
    pub frames: Vec<&'a Tensor>,
    pub candidates: Vec<&'a [u32]>,
    pub label: Option<usize>,
}

/// Chooses one candidate index per item.
pub trait Predictor {
    fn predict(&self, items: &[EvalItem]) -> Result<Vec<usize>>;
}

/// Highest-scoring candidate under a model.
pub struct ModelPredictor<'m> {
    pub model: &'m DestModel,
    pub mask: StreamMask,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, items: &[EvalItem]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_BATCH) {
            let mut g = Graph::new(&self.model.params);
            let inputs: Vec<StreamInput> = chunk
                .iter()
                .map(|it| StreamInput {
                    question: it.question,
                    frames: it.frames.clone(),
                    video: &it.video,
                })
                .collect();
            let rep = self.model.net.represent(&mut g, &inputs, self.mask)?;
            let mut distinct: Vec<&[u32]> = Vec::new();
            let mut column: HashMap<&[u32], usize> = HashMap::new();
            let targets: Vec<CeTarget> = chunk
                .iter()
                .map(|it| CeTarget {
                    candidates: it
                        .candidates
                        .iter()
                        .map(|&c| {
                            *column.entry(c).or_insert_with(|| {
                                distinct.push(c);
                                distinct.len() - 1
                            })
                        })
                        .collect(),
                    label: 0,
                })
                .collect();
            let z = self.model.net.encode_answers(&mut g, &distinct)?;
            let logits = g.matmul_nt(rep.combined, z);
            let values = g.value(logits);
            if values.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite answer score"));
            }
            out.extend(predictions(values, &targets));
        }
        Ok(out)
    }
}

/// Reads the gold label; items without one get candidate 0.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, items: &[EvalItem]) -> Result<Vec<usize>> {
        Ok(items.iter().map(|it| it.label.unwrap_or(0)).collect())
    }
}

/// Uniform over each item's candidates, seeded by `(seed, id)`.
pub struct RandomPredictor {
    pub seed: u64,
}

impl Predictor for RandomPredictor {
    fn predict(&self, items: &[EvalItem]) -> Result<Vec<usize>> {
        Ok(items
            .iter()
            .map(|it| indexed(self.seed, it.id).gen_range(0..it.candidates.len().max(1)))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: String,
    pub permutation: Permutation,
    pub mask: StreamMask,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: "test".into(),
            permutation: Permutation::Normal,
            mask: StreamMask::BOTH,
        }
    }
}

/// Scores `predictor` on `samples`. `config` is echoed into the report.
pub fn evaluate_with(
    predictor: &dyn Predictor,
    samples: Samples,
    answers: &[Vec<u32>],
    num_frames: usize,
    opts: &EvalOptions,
    config: &RunConfig,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::argument("empty evaluation set"));
    }
    let items = samples.items(answers, opts.permutation, num_frames);
    let preds = predictor.predict(&items)?;
    let mut per_type: Vec<TypeAccuracy> = samples
        .type_names()
        .into_iter()
        .map(|t| TypeAccuracy {
            question_type: t.into(),
            correct: 0,
            n: 0,
        })
        .collect();
    for (it, p) in items.iter().zip(preds) {
        let slot = per_type
            .iter_mut()
            .find(|t| t.question_type == it.question_type)
            .expect("known question type");
        slot.n += 1;
        slot.correct += (it.label == Some(p)) as usize;
    }
    Ok(EvalReport {
        split: opts.split.clone(),
        permutation: opts.permutation,
        streams: opts.mask.label().into(),
        per_type,
        config: serde_json::to_value(config).expect("config serializes"),
        seed: config.seed,
    })
}

fn compatibility_key(cfg: &RunConfig) -> serde_json::Value {
    let mut world = serde_json::to_value(&cfg.world).expect("config serializes");
    world.as_object_mut().expect("object").remove("num_videos_k");
    json!({
        "seed": cfg.seed,
        "world": world,
        "model": {
            "video_feature_size": cfg.model.video_feature_size,
            "num_patches": cfg.model.num_patches,
            "patch_size": cfg.model.patch_size,
        },
    })
}

/// Keys on which a model's configuration and a dataset's disagree in a
/// way that makes the dataset meaningless to the model: the world and its
/// seed, and the input shapes. Empty when compatible.
pub fn compatibility_diff(model: &RunConfig, data: &RunConfig) -> Vec<String> {
    json_diff(&compatibility_key(model), &compatibility_key(data))
}

/// Evaluates a checkpoint. Pre-training sets are scored through the video
/// stream alone; question-answering sets need a fine-tuned checkpoint.
pub fn evaluate(ckpt: &Checkpoint, samples: Samples, data_config: &RunConfig, opts: &EvalOptions) -> Result<EvalReport> {
    let cfg = &ckpt.header.config;
    let diff = compatibility_diff(cfg, data_config);
    if !diff.is_empty() {
        return Err(Error::config(format!(
            "checkpoint and dataset configs differ: {}",
            diff.join("; ")
        )));
    }
    let predictor = ModelPredictor {
        model: &ckpt.model,
        mask: opts.mask,
    };
    match samples {
        Samples::Trm(_) if opts.mask.use_il => Err(Error::argument(
            "pre-training samples have no frames; evaluate them with the video stream only",
        )),
        Samples::Qa(_) if ckpt.header.answer_vocab.is_empty() => Err(Error::argument(
            "checkpoint has no answer vocabulary; fine-tune it first",
        )),
        _ => evaluate_with(
            &predictor,
            samples,
            &ckpt.header.answer_vocab,
            cfg.finetune.num_frames_t,
            opts,
            cfg,
        ),
    }
}
