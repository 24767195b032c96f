//! Evaluation: accuracy by question type under reordered video input,
//! stream ablation, answer-vocabulary upper bounds and parameter sweeps.

pub mod predict;
pub mod protocols;
pub mod report;

pub use predict::{
    compatibility_diff, evaluate, evaluate_with, EvalItem, EvalOptions, ModelPredictor, OraclePredictor, Predictor,
    RandomPredictor, Samples,
};
pub use protocols::{
    answer_upper_bound, shuffle_report, shuffle_seed, stream_ablation, sweep, sweep_config, sweep_point, ShuffleReport,
    ShuffleRow, SweepAxis, SweepResult, UpperBound,
};
pub use report::{permute_rows, reports_csv, EvalReport, Permutation, TypeAccuracy};
