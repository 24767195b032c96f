//! Experiment plumbing shared by the command line, the evaluation
//! protocols and the tests: worlds and datasets derived from a run
//! configuration, and training runs that end in checkpoints.

use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::{json_diff, RunConfig};
use crate::data::{build_answer_vocabulary, gen_downstream_dataset, gen_trm_dataset, tokens, EventVocab, QaSample, TrmSample};
use crate::data::io::{read_qa_dataset, read_trm_dataset, write_qa_dataset, write_trm_dataset};
use crate::error::{Error, Result};
use crate::eval::Samples;
use crate::pipeline::{DestModel, StreamMask};
use crate::rng::{indexed, SeedPlan};
use crate::train::{finetune, pretrain, Checkpoint, CheckpointHeader, TrainLog, TrainState};

/// Data streams split off `SeedPlan::data`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataStream {
    World = 0,
    TrmTrain = 1,
    TrmTest = 2,
    QaTrain = 3,
    QaTest = 4,
}

pub fn stream_seed(cfg: &RunConfig, stream: DataStream) -> u64 {
    indexed(SeedPlan::from_master(cfg.seed).data, stream as u64).next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
}

pub fn world(cfg: &RunConfig) -> Result<EventVocab> {
    cfg.validate()?;
    EventVocab::generate(&cfg.world, &cfg.model, &mut indexed(stream_seed(cfg, DataStream::World), 0))
}

pub fn vocab_size(cfg: &RunConfig) -> usize {
    tokens::vocab_size(&cfg.world)
}

fn positive(size: usize, name: &str) -> Result<usize> {
    if size == 0 {
        return Err(Error::config(format!("{name} must be positive")));
    }
    Ok(size)
}

pub fn trm_splits(cfg: &RunConfig, vocab: &EventVocab) -> Result<Splits<TrmSample>> {
    let (k, m) = (cfg.world.num_videos_k, cfg.model.max_video_length);
    let gen = |size, stream| gen_trm_dataset(vocab, k, m, size, stream_seed(cfg, stream));
    Ok(Splits {
        train: gen(positive(cfg.data.trm_train_size, "trm_train_size")?, DataStream::TrmTrain)?,
        test: gen(positive(cfg.data.trm_test_size, "trm_test_size")?, DataStream::TrmTest)?,
    })
}

pub fn qa_splits(cfg: &RunConfig, vocab: &EventVocab) -> Result<Splits<QaSample>> {
    let (k, m) = (cfg.world.num_videos_k, cfg.model.max_video_length);
    let gen = |size, stream| gen_downstream_dataset(vocab, k, m, size, stream_seed(cfg, stream));
    Ok(Splits {
        train: gen(positive(cfg.data.qa_train_size, "qa_train_size")?, DataStream::QaTrain)?,
        test: gen(positive(cfg.data.qa_test_size, "qa_test_size")?, DataStream::QaTest)?,
    })
}

/// Which kind of samples a dataset holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Trm,
    Qa,
}

/// Written next to a dataset as `<stem>.info.json`: what it holds and the
/// configuration it was generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub task: Task,
    pub split: String,
    pub config: RunConfig,
}

pub fn info_path(stem: &Path) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".info.json");
    stem.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Trm(Vec<TrmSample>),
    Qa(Vec<QaSample>),
}

impl Dataset {
    pub fn samples(&self) -> Samples<'_> {
        match self {
            Dataset::Trm(s) => Samples::Trm(s),
            Dataset::Qa(s) => Samples::Qa(s),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Dataset::Trm(_) => Task::Trm,
            Dataset::Qa(_) => Task::Qa,
        }
    }
}

pub fn save_dataset(data: &Dataset, split: &str, cfg: &RunConfig, stem: &Path) -> Result<()> {
    match data {
        Dataset::Trm(s) => write_trm_dataset(s, stem)?,
        Dataset::Qa(s) => write_qa_dataset(s, stem)?,
    }
    let info = DatasetInfo {
        task: data.task(),
        split: split.into(),
        config: cfg.clone(),
    };
    std::fs::write(info_path(stem), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

pub fn load_info(stem: &Path) -> Result<DatasetInfo> {
    let path = info_path(stem);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let info: DatasetInfo =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    info.config.validate()?;
    Ok(info)
}

pub fn load_dataset(stem: &Path) -> Result<(DatasetInfo, Dataset)> {
    let info = load_info(stem)?;
    let data = match info.task {
        Task::Trm => Dataset::Trm(read_trm_dataset(stem)?),
        Task::Qa => Dataset::Qa(read_qa_dataset(stem)?),
    };
    Ok((info, data))
}

fn header(cfg: &RunConfig, stage: &str, state: &TrainState) -> CheckpointHeader {
    CheckpointHeader {
        config: cfg.clone(),
        stage: stage.into(),
        vocab_size: state.model.vocab_size,
        step: state.step,
        optim_step: state.optim.step,
        answer_vocab: Vec::new(),
        initialized_from: None,
    }
}

/// Pre-trains a freshly initialized model for the configured number of
/// steps.
pub fn pretrain_run(cfg: &RunConfig, data: &[TrmSample]) -> Result<(Checkpoint, TrainLog)> {
    pretrain_until(cfg, data, cfg.pretrain.training_steps)
}

/// Like [`pretrain_run`] but stops after `until` steps of the schedule.
pub fn pretrain_until(cfg: &RunConfig, data: &[TrmSample], until: u64) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let seeds = SeedPlan::from_master(cfg.seed);
    let model = DestModel::new(&cfg.model, vocab_size(cfg), seeds.init)?;
    let mut state = TrainState::new(model);
    let mut log = TrainLog::default();
    pretrain(&mut state, &cfg.pretrain, data, seeds, until, &mut log)?;
    Ok((pretrain_checkpoint(cfg, state), log))
}

fn pretrain_checkpoint(cfg: &RunConfig, state: TrainState) -> Checkpoint {
    Checkpoint {
        header: header(cfg, "pretrain", &state),
        model: state.model,
        optim: Some(state.optim),
    }
}

/// Continues a pre-training checkpoint up to `until` steps of its own
/// schedule.
pub fn resume_pretrain(ckpt: Checkpoint, data: &[TrmSample], until: u64) -> Result<(Checkpoint, TrainLog)> {
    if ckpt.header.stage != "pretrain" {
        return Err(Error::argument(format!("cannot resume pre-training from a {} checkpoint", ckpt.header.stage)));
    }
    let optim = ckpt
        .optim
        .ok_or_else(|| Error::argument("checkpoint has no optimizer state to resume from"))?;
    let cfg = ckpt.header.config;
    let mut state = TrainState {
        model: ckpt.model,
        optim,
        step: ckpt.header.step,
    };
    let mut log = TrainLog::default();
    pretrain(&mut state, &cfg.pretrain, data, SeedPlan::from_master(cfg.seed), until, &mut log)?;
    Ok((pretrain_checkpoint(&cfg, state), log))
}

/// Fine-tunes on question answering, starting from `init`'s parameters
/// (fresh optimizer state) or from a fresh model. The two starts differ
/// only in the initial parameters.
pub fn finetune_run(
    cfg: &RunConfig,
    init: Option<&Checkpoint>,
    data: &[QaSample],
    mask: StreamMask,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let seeds = SeedPlan::from_master(cfg.seed);
    let model = match init {
        None => DestModel::new(&cfg.model, vocab_size(cfg), seeds.init)?,
        Some(ckpt) => {
            let a = serde_json::to_value(&ckpt.header.config.model).expect("config serializes");
            let b = serde_json::to_value(&cfg.model).expect("config serializes");
            let diff = json_diff(&a, &b);
            if !diff.is_empty() || ckpt.header.vocab_size != vocab_size(cfg) {
                return Err(Error::config(format!(
                    "initial checkpoint does not match the model config: {}",
                    if diff.is_empty() { "vocab_size".to_string() } else { diff.join(", ") }
                )));
            }
            ckpt.model.clone()
        }
    };
    let answers = build_answer_vocabulary(data.iter().map(|s| s.answer.as_slice()))?;
    let mut state = TrainState::new(model);
    let mut log = TrainLog::default();
    finetune(&mut state, &cfg.finetune, data, &answers, mask, seeds, cfg.finetune.training_steps, &mut log)?;
    let mut h = header(cfg, "finetune", &state);
    h.answer_vocab = answers;
    h.initialized_from = init.map(|c| format!("{}@{}", c.header.stage, c.header.step));
    Ok((
        Checkpoint {
            header: h,
            model: state.model,
            optim: Some(state.optim),
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn info_sits_next_to_stem() {
        assert_eq!(info_path(Path::new("out/trm_train")), PathBuf::from("out/trm_train.info.json"));
    }

    #[test]
    fn streams_are_distinct() {
        let cfg = RunConfig::default();
        let seeds: Vec<u64> = [DataStream::World, DataStream::TrmTrain, DataStream::TrmTest, DataStream::QaTrain, DataStream::QaTest]
            .iter()
            .map(|&s| stream_seed(&cfg, s))
            .collect();
        for i in 0..seeds.len() {
            assert!(!seeds[i + 1..].contains(&seeds[i]));
        }
    }
}
