//! Pre-training and fine-tuning loops.
//!
//! Batch composition, frame sampling and dropout at step `n` are pure
//! functions of the run seeds and `n`, so a run resumed from a checkpoint
//! continues exactly as the uninterrupted run would.

use rand::seq::SliceRandom;

use crate::config::TrainConfig;
use crate::data::{QaSample, TrmSample};
use crate::error::{Error, Result};
use crate::numeric::optim::clip_grad_norm;
use crate::numeric::{adamw_step, AdamWConfig, CeTarget, Graph, OptimState, ParamGroup, Schedule};
use crate::pipeline::{sample_frames, DestModel, SampleMode, StreamMask};
use crate::rng::{indexed, indexed2, SeedPlan};

use super::batch::{count_correct, qa_inputs, qa_logits, trm_forward};
use super::losses::{combine_losses, AnswerIndex};

const FRAME_STREAM: u64 = 0x6672_616d_6573;

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DestModel,
    pub optim: OptimState,
    /// Loop iterations completed.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: DestModel) -> Self {
        let optim = OptimState::new(&model.params);
        TrainState {
            model,
            optim,
            step: 0,
        }
    }
}

/// Values recorded for one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss_task: f64,
    pub loss_align: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub correct: usize,
    pub count: usize,
}

/// One metrics CSV row: means over a logging interval.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_trm: f64,
    pub loss_align: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub trm_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub skipped: u64,
}

impl TrainLog {
    /// Interval means, one row per `interval` steps plus a final partial
    /// row. `step` is the 1-based count of the interval's last update and
    /// `lr` the scale applied there.
    pub fn rows(&self, interval: u64) -> Vec<MetricsRow> {
        let interval = interval.max(1) as usize;
        self.steps
            .chunks(interval)
            .map(|c| {
                let n = c.len() as f64;
                let count: usize = c.iter().map(|r| r.count).sum();
                let correct: usize = c.iter().map(|r| r.correct).sum();
                let last = c.last().unwrap();
                MetricsRow {
                    step: last.step + 1,
                    loss_trm: c.iter().map(|r| r.loss_task).sum::<f64>() / n,
                    loss_align: c.iter().map(|r| r.loss_align).sum::<f64>() / n,
                    loss_total: c.iter().map(|r| r.loss_total).sum::<f64>() / n,
                    lr: last.lr,
                    trm_acc: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
                }
            })
            .collect()
    }

    pub fn csv(&self, interval: u64) -> String {
        let mut out = String::from("step,loss_trm,loss_align,loss_total,lr,trm_acc\n");
        for r in self.rows(interval) {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6e},{:.4}\n",
                r.step, r.loss_trm, r.loss_align, r.loss_total, r.lr, r.trm_acc
            ));
        }
        out
    }

    /// Mean task loss over steps `[from, to)`.
    pub fn mean_task_loss(&self, from: usize, to: usize) -> f64 {
        let s = &self.steps[from.min(self.steps.len())..to.min(self.steps.len())];
        s.iter().map(|r| r.loss_task).sum::<f64>() / s.len().max(1) as f64
    }
}

/// Dataset indices for `step`: consecutive slices of per-epoch
/// permutations, each permutation seeded by its epoch number.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + j;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut indexed(seed, epoch));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
    }
    out
}

fn optimizer(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    }
}

fn group_lr(cfg: &TrainConfig, group: ParamGroup) -> f64 {
    match group {
        ParamGroup::Base => cfg.lr_base,
        ParamGroup::Video => cfg.lr_video,
        ParamGroup::Mlp => cfg.lr_mlp,
        ParamGroup::Answer => cfg.lr_ans,
    }
}

fn check_range(state: &TrainState, cfg: &TrainConfig, until: u64) -> Result<Schedule> {
    cfg.validate()?;
    if until > cfg.training_steps {
        return Err(Error::argument(format!(
            "cannot train to step {until} of a {}-step schedule",
            cfg.training_steps
        )));
    }
    if state.step > until {
        return Err(Error::argument("state is already past the requested step"));
    }
    Schedule::new(1.0, cfg.warmup, cfg.training_steps)
}

/// Clips, then applies one AdamW update scaled by the schedule at the
/// 1-based update number `step + 1`. Returns the schedule scale.
fn apply_update(
    state: &mut TrainState,
    grads: &mut crate::numeric::Gradients,
    cfg: &TrainConfig,
    sched: &Schedule,
) -> Result<f64> {
    let scale = sched.lr_at_step(state.step + 1)?;
    clip_grad_norm(grads, cfg.grad_clip);
    adamw_step(
        &mut state.model.params,
        grads,
        &mut state.optim,
        |g| scale * group_lr(cfg, g),
        &optimizer(cfg),
    )?;
    Ok(scale)
}

/// Runs pre-training steps until `state.step == until`. On a numeric
/// failure the state keeps its last good values and the error is
/// returned.
pub fn pretrain(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &[TrmSample],
    seeds: SeedPlan,
    until: u64,
    log: &mut TrainLog,
) -> Result<()> {
    let sched = check_range(state, cfg, until)?;
    if data.is_empty() {
        return Err(Error::argument("empty pre-training set"));
    }
    while state.step < until {
        let idx = batch_indices(seeds.data, state.step, cfg.batch_size, data.len());
        let batch: Vec<&TrmSample> = idx.iter().map(|&i| &data[i]).collect();
        let (mut grads, l_trm, l_align, l_total, correct) = {
            let model = &state.model;
            let mut g = Graph::training(&model.params, indexed(seeds.dropout, state.step));
            let fw = trm_forward(&mut g, &model.net, &batch, true)?;
            let l_trm = g.cross_entropy(fw.logits, fw.targets.clone());
            let l_align = fw.align.expect("alignment requested");
            let s1 = g.param(model.net.loss_s1);
            let s2 = g.param(model.net.loss_s2);
            let total = combine_losses(&mut g, l_trm, l_align, cfg.loss_combination, s1, s2);
            let correct = count_correct(g.value(fw.logits), &fw.targets);
            let grads = g.backward(total)?;
            (grads, g.scalar(l_trm), g.scalar(l_align), g.scalar(total), correct)
        };
        let lr = apply_update(state, &mut grads, cfg, &sched)?;
        log.steps.push(StepRecord {
            step: state.step,
            loss_task: l_trm,
            loss_align: l_align,
            loss_total: l_total,
            lr,
            correct,
            count: batch.len(),
        });
        state.step += 1;
    }
    Ok(())
}

/// Runs fine-tuning steps on question answering until `state.step ==
/// until`. Samples whose answer is outside `answers` are skipped and
/// counted in `log.skipped`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &[QaSample],
    answers: &[Vec<u32>],
    mask: StreamMask,
    seeds: SeedPlan,
    until: u64,
    log: &mut TrainLog,
) -> Result<()> {
    let sched = check_range(state, cfg, until)?;
    if data.is_empty() || answers.is_empty() {
        return Err(Error::argument("fine-tuning needs samples and an answer vocabulary"));
    }
    let answer_refs: Vec<&[u32]> = answers.iter().map(|a| a.as_slice()).collect();
    let mut index = AnswerIndex::new(answers);
    while state.step < until {
        let idx = batch_indices(seeds.data, state.step, cfg.batch_size, data.len());
        let mut batch = Vec::with_capacity(idx.len());
        let mut targets: Vec<CeTarget> = Vec::with_capacity(idx.len());
        let mut frames = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let s = &data[i];
            let mut rng = indexed2(seeds.data ^ FRAME_STREAM, state.step, j as u64);
            let chosen = sample_frames(s.frames.len(), cfg.num_frames_t, SampleMode::Train, &mut rng);
            if let Some(t) = index.target(&s.answer) {
                batch.push(s);
                targets.push(t);
                frames.push(chosen);
            }
        }
        if batch.is_empty() {
            state.step += 1;
            continue;
        }
        let (mut grads, loss, correct) = {
            let model = &state.model;
            let mut g = Graph::training(&model.params, indexed(seeds.dropout, state.step));
            let items = qa_inputs(&batch, &frames);
            let z = model.net.encode_answers(&mut g, &answer_refs)?;
            let logits = qa_logits(&mut g, &model.net, &items, z, mask)?;
            let loss = g.cross_entropy(logits, targets.clone());
            let correct = count_correct(g.value(logits), &targets);
            let grads = g.backward(loss)?;
            (grads, g.scalar(loss), correct)
        };
        let lr = apply_update(state, &mut grads, cfg, &sched)?;
        log.steps.push(StepRecord {
            step: state.step,
            loss_task: loss,
            loss_align: 0.0,
            loss_total: loss,
            lr,
            correct,
            count: batch.len(),
        });
        state.step += 1;
    }
    log.skipped += index.skipped;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen = vec![0; n];
        for step in 0..5 {
            for i in batch_indices(3, step, 2, n) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batch_indices(3, 7, 4, n), batch_indices(3, 7, 4, n));
    }
}
