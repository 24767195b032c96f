use std::fmt::Write as _;

use super::predict::{evaluate, EvalOptions, Samples};
use super::report::{reports_csv, EvalReport, Permutation};
use crate::config::RunConfig;
use crate::data::vocab::coverage;
use crate::data::{build_answer_vocabulary, QaSample, QuestionType};
use crate::error::{Error, Result};
use crate::pipeline::StreamMask;
use crate::run;
use crate::train::Checkpoint;

/// Normal versus shuffled accuracy for one question type, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShuffleRow {
    pub question_type: String,
    pub normal: f64,
    pub shuffled_mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub shuffled_stdev: f64,
    /// `normal - shuffled_mean`, sign kept.
    pub drop: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShuffleReport {
    pub normal: EvalReport,
    pub shuffled: Vec<EvalReport>,
    pub rows: Vec<ShuffleRow>,
}

/// Seeds used for the `i`-th shuffled evaluation under a run seed.
pub fn shuffle_seed(run_seed: u64, i: usize) -> u64 {
    run_seed.wrapping_mul(1000).wrapping_add(i as u64 + 1)
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ShuffleReport {
    pub fn build(normal: EvalReport, shuffled: Vec<EvalReport>) -> Self {
        let mut types: Vec<(String, f64)> = normal
            .per_type
            .iter()
            .map(|t| (t.question_type.clone(), t.accuracy()))
            .collect();
        types.push(("all".into(), normal.accuracy()));
        let rows = types
            .into_iter()
            .map(|(ty, base)| {
                let accs: Vec<f64> = shuffled
                    .iter()
                    .map(|r| if ty == "all" { r.accuracy() } else { r.type_accuracy(&ty).unwrap_or(0.0) })
                    .collect();
                let (mean, sd) = mean_stdev(&accs);
                ShuffleRow {
                    question_type: ty,
                    normal: base,
                    shuffled_mean: mean,
                    shuffled_stdev: sd,
                    drop: base - mean,
                }
            })
            .collect();
        ShuffleReport {
            normal,
            shuffled,
            rows,
        }
    }

    pub fn row(&self, question_type: &str) -> Option<&ShuffleRow> {
        self.rows.iter().find(|r| r.question_type == question_type)
    }

    /// Every underlying report in the evaluation CSV layout.
    pub fn csv(&self) -> String {
        let mut all = vec![self.normal.clone()];
        all.extend(self.shuffled.iter().cloned());
        reports_csv(&all)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("question_type,normal,shuffled_mean,shuffled_stdev,drop,n_seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                r.question_type,
                r.normal,
                r.shuffled_mean,
                r.shuffled_stdev,
                r.drop,
                self.shuffled.len()
            );
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "video feature order shuffled per sample, {} seeds; frames untouched\n",
            self.shuffled.len()
        );
        let _ = writeln!(out, "{:<12} {:>8} {:>17} {:>8}", "type", "normal", "shuffled", "drop");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>7.2}% {:>7.2}% ± {:>5.2} {:>7.2}",
                r.question_type,
                100.0 * r.normal,
                100.0 * r.shuffled_mean,
                100.0 * r.shuffled_stdev,
                100.0 * r.drop
            );
        }
        out
    }
}

/// Normal evaluation plus `n_seeds` shuffled ones.
pub fn shuffle_report(
    ckpt: &Checkpoint,
    samples: Samples,
    data_config: &RunConfig,
    n_seeds: usize,
    opts: &EvalOptions,
) -> Result<ShuffleReport> {
    if n_seeds == 0 {
        return Err(Error::argument("n_seeds must be at least 1"));
    }
    let normal = evaluate(
        ckpt,
        samples,
        data_config,
        &EvalOptions {
            permutation: Permutation::Normal,
            ..opts.clone()
        },
    )?;
    let shuffled = (0..n_seeds)
        .map(|i| {
            let o = EvalOptions {
                permutation: Permutation::Shuffled(shuffle_seed(ckpt.header.config.seed, i)),
                ..opts.clone()
            };
            evaluate(ckpt, samples, data_config, &o)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShuffleReport::build(normal, shuffled))
}

/// Reports for both streams, the image stream alone and the video stream
/// alone.
pub fn stream_ablation(ckpt: &Checkpoint, samples: &[QaSample], data_config: &RunConfig, split: &str) -> Result<Vec<EvalReport>> {
    [StreamMask::BOTH, StreamMask::IL_ONLY, StreamMask::VL_ONLY]
        .into_iter()
        .map(|mask| {
            let opts = EvalOptions {
                split: split.into(),
                permutation: Permutation::Normal,
                mask,
            };
            evaluate(ckpt, Samples::Qa(samples), data_config, &opts)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpperBound {
    pub question_type: String,
    /// Fraction of test answers in the training answer vocabulary.
    pub fraction: f64,
    pub n: usize,
}

/// Per-type share of test answers that a model restricted to the
/// training answer vocabulary could produce at all.
pub fn answer_upper_bound(train: &[QaSample], test: &[QaSample]) -> Result<Vec<UpperBound>> {
    let vocab = build_answer_vocabulary(train.iter().map(|s| s.answer.as_slice()))?;
    Ok(QuestionType::ALL
        .iter()
        .map(|&ty| {
            let answers: Vec<&[u32]> = test
                .iter()
                .filter(|s| s.question_type() == ty)
                .map(|s| s.answer.as_slice())
                .collect();
            UpperBound {
                question_type: ty.name().into(),
                fraction: coverage(&vocab, answers.iter().copied()).unwrap_or(0.0),
                n: answers.len(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Sequence length of the pre-training world; pre-trains and scores
    /// held-out pre-training samples.
    K,
    /// Frames per question; fine-tunes and scores held-out questions.
    T,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::K => "K",
            SweepAxis::T => "T",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(SweepAxis::K),
            "T" | "t" => Ok(SweepAxis::T),
            _ => Err(Error::config(format!("unknown sweep axis {s}; expected K or T"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<(usize, EvalReport)>,
}

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut out = format!("axis,value,{}\n", EvalReport::CSV_HEADER);
        for (v, r) in &self.points {
            for line in r.csv_rows().lines() {
                let _ = writeln!(out, "{},{v},{line}", self.axis.name());
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for (v, r) in &self.points {
            let _ = writeln!(out, "{} = {v}", self.axis.name());
            out.push_str(&r.table());
        }
        out
    }
}

/// The configuration used at one sweep point.
pub fn sweep_config(base: &RunConfig, axis: SweepAxis, value: usize) -> RunConfig {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::K => cfg.world.num_videos_k = value,
        SweepAxis::T => cfg.finetune.num_frames_t = value,
    }
    cfg
}

/// Train and evaluate once. The `T` axis fine-tunes from `init` when
/// given; the `K` axis always pre-trains from scratch.
pub fn sweep_point(cfg: &RunConfig, axis: SweepAxis, init: Option<&Checkpoint>) -> Result<EvalReport> {
    let world = run::world(cfg)?;
    match axis {
        SweepAxis::K => {
            let data = run::trm_splits(cfg, &world)?;
            let (ckpt, _) = run::pretrain_run(cfg, &data.train)?;
            let opts = EvalOptions {
                mask: StreamMask::VL_ONLY,
                ..EvalOptions::default()
            };
            evaluate(&ckpt, Samples::Trm(&data.test), cfg, &opts)
        }
        SweepAxis::T => {
            let data = run::qa_splits(cfg, &world)?;
            let (ckpt, _) = run::finetune_run(cfg, init, &data.train, StreamMask::BOTH)?;
            evaluate(&ckpt, Samples::Qa(&data.test), cfg, &EvalOptions::default())
        }
    }
}

pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[usize], init: Option<&Checkpoint>) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::argument("sweep needs at least one value"));
    }
    let points = values
        .iter()
        .map(|&v| sweep_point(&sweep_config(base, axis, v), axis, init).map(|r| (v, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { axis, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_stdev() {
        let (m, s) = mean_stdev(&[0.2, 0.4, 0.6]);
        assert!((m - 0.4).abs() < 1e-15);
        assert!((s - 0.2).abs() < 1e-15);
        assert_eq!(mean_stdev(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn axis_parses() {
        assert_eq!("K".parse::<SweepAxis>().unwrap(), SweepAxis::K);
        assert!("Q".parse::<SweepAxis>().is_err());
    }
}
