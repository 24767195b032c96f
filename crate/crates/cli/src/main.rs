use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dest_core::config::RunConfig;
use dest_core::eval::{
    answer_upper_bound, compatibility_diff, evaluate, shuffle_report, shuffle_seed, stream_ablation,
    sweep, EvalOptions, Permutation, SweepAxis,
};
use dest_core::pipeline::StreamMask;
use dest_core::run::{self, Dataset, DatasetInfo, Task};
use dest_core::train::fidelity::{tiny_gradcheck, GRADCHECK_TOL};
use dest_core::train::{Checkpoint, TrainLog};
use dest_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dest", version, about = "Two-stream video question answering on a synthetic event world")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Streams {
    Both,
    Il,
    Vl,
}

impl Streams {
    fn mask(self) -> StreamMask {
        match self {
            Streams::Both => StreamMask::BOTH,
            Streams::Il => StreamMask::IL_ONLY,
            Streams::Vl => StreamMask::VL_ONLY,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Trm,
    Qa,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the event world and write it with the resolved config.
    GenWorld,
    /// Generate train and test splits (pre-training by default).
    GenTrm {
        #[arg(long, value_enum, default_value = "trm")]
        task: TaskArg,
    },
    /// Pre-train on a pre-training split, or resume a checkpoint.
    Pretrain {
        /// Dataset stem, e.g. out/trm_train.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps of the schedule.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Fine-tune on a question-answering split.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint's parameters.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        streams: Streams,
    },
    /// Accuracy by question type.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// normal, reversed, shuffled or shuffled:<seed>.
        #[arg(long, default_value = "normal")]
        permutation: String,
        /// Defaults to vl for pre-training data and both otherwise.
        #[arg(long, value_enum)]
        streams: Option<Streams>,
    },
    /// Normal versus shuffled video order.
    ShuffleReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        n_seeds: usize,
        #[arg(long, value_enum)]
        streams: Option<Streams>,
    },
    /// Both streams, image stream only, video stream only.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training split for the answer-vocabulary upper bound.
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Retrain and evaluate over values of K (sequence length) or T
    /// (frames per question).
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Checkpoint to fine-tune from on the T axis.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Finite-difference check of the full model at tiny dimensions.
    Gradcheck,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(out: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = out.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn load_task(stem: &Path, task: Task) -> Result<(DatasetInfo, Dataset)> {
    let (info, data) = run::load_dataset(stem)?;
    if info.task != task {
        return Err(Error::argument(format!(
            "{} holds {:?} samples, expected {task:?}",
            stem.display(),
            info.task
        )));
    }
    Ok((info, data))
}

fn check_dataset(cfg: &RunConfig, info: &DatasetInfo) -> Result<()> {
    let diff = compatibility_diff(cfg, &info.config);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!("run and dataset configs differ: {}", diff.join("; "))))
    }
}

fn save_training(out: &Path, stage: &str, ckpt: &Checkpoint, log: &TrainLog, interval: u64) -> Result<()> {
    let path = out.join(format!("{stage}.dstc"));
    ckpt.save(&path)?;
    let metrics = write(out, &format!("{stage}_metrics.csv"), &log.csv(interval))?;
    println!("{stage}: {} steps", ckpt.header.step);
    if let Some(last) = log.rows(interval).last() {
        println!(
            "last interval: loss {:.4}, align {:.4}, accuracy {:.3}",
            last.loss_trm, last.loss_align, last.trm_acc
        );
    }
    if log.skipped > 0 {
        println!("samples skipped (answer outside vocabulary): {}", log.skipped);
    }
    println!("wrote {} and {}", path.display(), metrics.display());
    Ok(())
}

fn parse_permutation(text: &str, run_seed: u64) -> Result<Permutation> {
    match text {
        "normal" => Ok(Permutation::Normal),
        "reversed" => Ok(Permutation::Reversed),
        "shuffled" => Ok(Permutation::Shuffled(shuffle_seed(run_seed, 0))),
        _ => match text.strip_prefix("shuffled:").map(str::parse::<u64>) {
            Some(Ok(seed)) => Ok(Permutation::Shuffled(seed)),
            _ => Err(Error::argument(format!(
                "unknown permutation {text}; use normal, reversed, shuffled or shuffled:<seed>"
            ))),
        },
    }
}

fn default_mask(task: Task, streams: Option<Streams>) -> StreamMask {
    match (streams, task) {
        (Some(s), _) => s.mask(),
        (None, Task::Trm) => StreamMask::VL_ONLY,
        (None, Task::Qa) => StreamMask::BOTH,
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::GenWorld => {
            let cfg = resolve_config(cli)?;
            let world = run::world(&cfg)?;
            let json = serde_json::json!({
                "signatures": world.signatures,
                "captions": world.captions,
                "attribute_patches": world.attribute_patches.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>(),
            });
            write(out, "config.json", &cfg.to_json())?;
            let path = write(out, "world.json", &serde_json::to_string_pretty(&json)?)?;
            println!(
                "{} events, {} attributes; wrote {}",
                world.event_count(),
                world.attribute_count(),
                path.display()
            );
        }
        Command::GenTrm { task } => {
            let cfg = resolve_config(cli)?;
            let world = run::world(&cfg)?;
            let (prefix, train, test) = match task {
                TaskArg::Trm => {
                    let s = run::trm_splits(&cfg, &world)?;
                    ("trm", Dataset::Trm(s.train), Dataset::Trm(s.test))
                }
                TaskArg::Qa => {
                    let s = run::qa_splits(&cfg, &world)?;
                    ("qa", Dataset::Qa(s.train), Dataset::Qa(s.test))
                }
            };
            for (split, data) in [("train", &train), ("test", &test)] {
                let stem = out.join(format!("{prefix}_{split}"));
                run::save_dataset(data, split, &cfg, &stem)?;
                println!("wrote {} ({} samples)", stem.display(), data.samples().len());
            }
        }
        Command::Pretrain { data, resume, steps } => {
            let (info, data) = load_task(data, Task::Trm)?;
            let Dataset::Trm(samples) = data else { unreachable!() };
            let (ckpt, log, cfg) = match resume {
                Some(p) => {
                    let ckpt = Checkpoint::load(p)?;
                    let cfg = ckpt.header.config.clone();
                    check_dataset(&cfg, &info)?;
                    let until = steps.unwrap_or(cfg.pretrain.training_steps);
                    let (c, l) = run::resume_pretrain(ckpt, &samples, until)?;
                    (c, l, cfg)
                }
                None => {
                    let cfg = resolve_config(cli)?;
                    check_dataset(&cfg, &info)?;
                    let until = steps.unwrap_or(cfg.pretrain.training_steps);
                    let (c, l) = run::pretrain_until(&cfg, &samples, until)?;
                    (c, l, cfg)
                }
            };
            save_training(out, "pretrain", &ckpt, &log, cfg.pretrain.log_interval)?;
        }
        Command::Finetune { data, init, streams } => {
            let cfg = resolve_config(cli)?;
            let (info, data) = load_task(data, Task::Qa)?;
            check_dataset(&cfg, &info)?;
            let Dataset::Qa(samples) = data else { unreachable!() };
            let init = init.as_deref().map(Checkpoint::load).transpose()?;
            let (ckpt, log) = run::finetune_run(&cfg, init.as_ref(), &samples, streams.mask())?;
            save_training(out, "finetune", &ckpt, &log, cfg.finetune.log_interval)?;
        }
        Command::Eval {
            checkpoint,
            data,
            permutation,
            streams,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let (info, data) = run::load_dataset(data)?;
            let opts = EvalOptions {
                split: info.split.clone(),
                permutation: parse_permutation(permutation, ckpt.header.config.seed)?,
                mask: default_mask(info.task, *streams),
            };
            let report = evaluate(&ckpt, data.samples(), &info.config, &opts)?;
            print!("{}", report.table());
            let path = write(out, "eval.csv", &report.csv())?;
            println!("wrote {}", path.display());
        }
        Command::ShuffleReport {
            checkpoint,
            data,
            n_seeds,
            streams,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let (info, data) = run::load_dataset(data)?;
            let opts = EvalOptions {
                split: info.split.clone(),
                permutation: Permutation::Normal,
                mask: default_mask(info.task, *streams),
            };
            let report = shuffle_report(&ckpt, data.samples(), &info.config, *n_seeds, &opts)?;
            print!("{}", report.table());
            write(out, "shuffle.csv", &report.csv())?;
            let path = write(out, "shuffle_summary.csv", &report.summary_csv())?;
            println!("wrote {} and shuffle.csv", path.display());
        }
        Command::Ablate { checkpoint, data, train } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let (info, data) = load_task(data, Task::Qa)?;
            let Dataset::Qa(samples) = data else { unreachable!() };
            let reports = stream_ablation(&ckpt, &samples, &info.config, &info.split)?;
            for r in &reports {
                print!("{}", r.table());
            }
            for r in &reports {
                let path = write(out, &format!("ablation_{}.csv", r.streams), &r.csv())?;
                println!("wrote {}", path.display());
            }
            if let Some(train) = train {
                let (_, train) = load_task(train, Task::Qa)?;
                let Dataset::Qa(train) = train else { unreachable!() };
                println!("answer-vocabulary upper bound:");
                for b in answer_upper_bound(&train, &samples)? {
                    println!("{:<12} {:>7.2}% {:>7}", b.question_type, 100.0 * b.fraction, b.n);
                }
            }
        }
        Command::Sweep { axis, values, init } => {
            let cfg = resolve_config(cli)?;
            let init = init.as_deref().map(Checkpoint::load).transpose()?;
            let result = sweep(&cfg, *axis, values, init.as_ref())?;
            print!("{}", result.table());
            let path = write(out, &format!("sweep_{}.csv", axis.name()), &result.csv())?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck => {
            let seed = cli.seed.unwrap_or(0);
            let report = tiny_gradcheck(seed)?;
            for (group, err) in report.by_group() {
                println!("{group:<16} {err:.3e}");
            }
            println!("max relative error {:.3e} (tolerance {GRADCHECK_TOL:e})", report.max_rel_err);
            if !report.passed {
                let worst = report.worst().map(|p| p.name.clone()).unwrap_or_default();
                return Err(Error::numeric(format!("gradient check failed at {worst}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
