//! Run configuration. Key names follow the usual architecture and
//! optimization hyperparameter tables; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which answer head the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both streams, answers scored against `r + s`.
    Dest,
    /// Question classification vector only, no visual input.
    QuestionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossCombination {
    Unweighted,
    Uncertainty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden_size: usize,
    pub num_patches: usize,
    /// Width of one image patch vector before projection.
    pub patch_size: usize,
    pub video_feature_size: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub max_video_length: usize,
    pub max_question_length: usize,
    pub init_temperature: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_size: 32,
            num_layers: 2,
            num_heads: 4,
            ffn_hidden_size: 64,
            num_patches: 4,
            patch_size: 16,
            video_feature_size: 16,
            dropout: 0.1,
            attention_dropout: 0.1,
            max_video_length: 100,
            max_question_length: 50,
            init_temperature: 0.07,
            variant: Variant::Dest,
        }
    }
}

impl ModelConfig {
    /// Full-size architecture values, expressible through the same schema.
    pub fn reference_scale() -> Self {
        ModelConfig {
            embedding_size: 768,
            num_layers: 6,
            num_heads: 12,
            ffn_hidden_size: 3072,
            num_patches: 576,
            patch_size: 768,
            video_feature_size: 1024,
            ..ModelConfig::default()
        }
    }

    pub fn projection_dim(&self) -> usize {
        (self.embedding_size / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embedding_size;
        if d == 0 || self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embedding_size {d} must be a positive multiple of num_heads {}",
                self.num_heads
            )));
        }
        if self.num_layers == 0 || self.ffn_hidden_size == 0 {
            return Err(Error::config("num_layers and ffn_hidden_size must be positive"));
        }
        if self.num_patches == 0 || self.patch_size == 0 || self.video_feature_size == 0 {
            return Err(Error::config("patch and feature sizes must be positive"));
        }
        if self.max_video_length == 0 || self.max_question_length == 0 {
            return Err(Error::config("length limits must be positive"));
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.init_temperature.is_nan() || self.init_temperature <= 0.0 {
            return Err(Error::config("init_temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub lr_video: f64,
    pub lr_mlp: f64,
    pub lr_ans: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Warmup as a fraction of `training_steps`.
    pub warmup: f64,
    pub batch_size: usize,
    pub training_steps: u64,
    pub grad_clip: f64,
    pub loss_combination: LossCombination,
    pub num_frames_t: usize,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_base: 1e-3,
            lr_video: 1e-3,
            lr_mlp: 1e-3,
            lr_ans: 1e-3,
            weight_decay: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            warmup: 0.1,
            batch_size: 16,
            training_steps: 1000,
            grad_clip: 1.0,
            loss_combination: LossCombination::Unweighted,
            num_frames_t: 4,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_base", self.lr_base),
            ("lr_video", self.lr_video),
            ("lr_mlp", self.lr_mlp),
            ("lr_ans", self.lr_ans),
        ] {
            if lr.is_nan() || lr < 0.0 {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(Error::config("warmup must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.training_steps == 0 || self.num_frames_t == 0 {
            return Err(Error::config(
                "batch_size, training_steps and num_frames_t must be positive",
            ));
        }
        if self.log_interval == 0 {
            return Err(Error::config("log_interval must be positive"));
        }
        Ok(())
    }
}

/// Parameters of the synthetic event world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub event_count: usize,
    pub attribute_count: usize,
    pub caption_length: usize,
    pub duration_min: usize,
    pub duration_max: usize,
    /// Feature noise standard deviation relative to `|signature| / sqrt(H)`.
    pub noise_ratio: f64,
    /// Noise standard deviation added to frame patches.
    pub frame_noise: f64,
    pub signature_min_distance: f64,
    pub num_videos_k: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            event_count: 16,
            attribute_count: 8,
            caption_length: 2,
            duration_min: 2,
            duration_max: 6,
            noise_ratio: 0.1,
            frame_noise: 0.1,
            signature_min_distance: 1.0,
            num_videos_k: 4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.event_count < 2 || self.attribute_count < 2 {
            return Err(Error::config("need at least two events and two attributes"));
        }
        if self.duration_min == 0 || self.duration_min > self.duration_max {
            return Err(Error::config("duration bounds must satisfy 1 <= min <= max"));
        }
        if self.caption_length == 0 {
            return Err(Error::config("caption_length must be positive"));
        }
        if self.num_videos_k < 2 || self.num_videos_k > self.event_count {
            return Err(Error::config(
                "num_videos_k must lie in [2, event_count] so sequences hold distinct events",
            ));
        }
        if self.noise_ratio < 0.0 || self.frame_noise < 0.0 {
            return Err(Error::config("noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Dataset sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub trm_train_size: usize,
    pub trm_test_size: usize,
    pub qa_train_size: usize,
    pub qa_test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            trm_train_size: 5000,
            trm_test_size: 1000,
            qa_train_size: 2000,
            qa_test_size: 1000,
        }
    }
}

/// Everything a run needs; echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: TrainConfig {
                lr_base: 5e-4,
                lr_video: 5e-4,
                lr_mlp: 5e-4,
                lr_ans: 5e-4,
                warmup: 0.03,
                batch_size: 32,
                training_steps: 3000,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                training_steps: 200,
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Dotted keys whose values differ between two JSON documents.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(&p, u, v, out),
                        (Some(u), None) => out.push(format!("{p}: {u} vs <missing>")),
                        (None, Some(v)) => out.push(format!("{p}: <missing> vs {v}")),
                        (None, None) => {}
                    }
                }
            }
            _ if a != b => out.push(format!("{prefix}: {a} vs {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", a, b, &mut out);
    out
}
