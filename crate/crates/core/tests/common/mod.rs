#![allow(dead_code)]

use dest_core::config::{ModelConfig, RunConfig};

/// Small enough that a pre-train or fine-tune run takes a second or two.
pub fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.model = ModelConfig {
        embedding_size: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden_size: 32,
        ..ModelConfig::default()
    };
    cfg.data.trm_train_size = 200;
    cfg.data.trm_test_size = 120;
    cfg.data.qa_train_size = 200;
    cfg.data.qa_test_size = 120;
    for t in [&mut cfg.pretrain, &mut cfg.finetune] {
        t.training_steps = 30;
        t.batch_size = 8;
        t.num_frames_t = 2;
        t.log_interval = 5;
    }
    cfg
}
