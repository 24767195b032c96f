use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numeric::Tensor;
use crate::rng::indexed;

/// Order in which a video's feature rows reach the contextualizer.
/// Frames for the image stream are never reordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permutation {
    Normal,
    /// Independent uniform shuffle per sample, seeded by `(seed, id)`.
    Shuffled(u64),
    Reversed,
}

impl Permutation {
    pub fn label(&self) -> &'static str {
        match self {
            Permutation::Normal => "normal",
            Permutation::Shuffled(_) => "shuffled",
            Permutation::Reversed => "reversed",
        }
    }

    /// Row order applied to a video of `rows` rows.
    pub fn order(&self, rows: usize, sample_id: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..rows).collect();
        match self {
            Permutation::Normal => {}
            Permutation::Shuffled(seed) => idx.shuffle(&mut indexed(*seed, sample_id)),
            Permutation::Reversed => idx.reverse(),
        }
        idx
    }

    pub fn apply(&self, features: &Tensor, sample_id: u64) -> Tensor {
        if *self == Permutation::Normal {
            return features.clone();
        }
        permute_rows(features, &self.order(features.rows(), sample_id))
    }
}

pub fn permute_rows(features: &Tensor, order: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(features.len());
    for &r in order {
        data.extend_from_slice(features.row(r));
    }
    Tensor::matrix(order.len(), features.cols(), data).expect("same shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub question_type: String,
    pub correct: usize,
    pub n: usize,
}

impl TypeAccuracy {
    /// Zero for an empty type.
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub permutation: Permutation,
    /// Streams used: `both`, `il` or `vl`.
    pub streams: String,
    /// Every question type of the dataset's kind, in a fixed order.
    pub per_type: Vec<TypeAccuracy>,
    /// Configuration of the evaluated model.
    pub config: serde_json::Value,
    /// Written to the seed column when the permutation has no seed.
    pub seed: u64,
}

impl EvalReport {
    pub fn n(&self) -> usize {
        self.per_type.iter().map(|t| t.n).sum()
    }

    pub fn correct(&self) -> usize {
        self.per_type.iter().map(|t| t.correct).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.n();
        if n == 0 {
            0.0
        } else {
            self.correct() as f64 / n as f64
        }
    }

    pub fn type_accuracy(&self, question_type: &str) -> Option<f64> {
        self.per_type
            .iter()
            .find(|t| t.question_type == question_type)
            .map(|t| t.accuracy())
    }

    pub fn seed_column(&self) -> u64 {
        match self.permutation {
            Permutation::Shuffled(s) => s,
            _ => self.seed,
        }
    }

    pub const CSV_HEADER: &'static str = "split,question_type,permutation,seed,accuracy,n";

    /// Data rows (no header): one per type, then `all`.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let rows = self
            .per_type
            .iter()
            .map(|t| (t.question_type.as_str(), t.accuracy(), t.n))
            .chain(std::iter::once(("all", self.accuracy(), self.n())));
        for (ty, acc, n) in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{}",
                self.split,
                ty,
                self.permutation.label(),
                self.seed_column(),
                acc,
                n
            );
        }
        out
    }

    pub fn csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "split {}  streams {}  order {}",
            self.split,
            self.streams,
            self.permutation.label()
        );
        if let Permutation::Shuffled(s) = self.permutation {
            let _ = write!(out, " (seed {s})");
        }
        out.push('\n');
        let _ = writeln!(out, "{:<12} {:>9} {:>7}", "type", "accuracy", "n");
        for t in &self.per_type {
            let _ = writeln!(out, "{:<12} {:>8.2}% {:>7}", t.question_type, 100.0 * t.accuracy(), t.n);
        }
        let _ = writeln!(out, "{:<12} {:>8.2}% {:>7}", "all", 100.0 * self.accuracy(), self.n());
        out
    }
}

/// Several reports under one header.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    out
}
