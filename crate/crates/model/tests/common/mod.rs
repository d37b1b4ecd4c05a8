#![allow(dead_code)]

use c2r_model::config::StageConfig;
use c2r_model::data::Datasets;
use c2r_model::DitConfig;

/// Micro setup shrunk further so that training tests run in seconds.
pub fn test_config(stage: u8) -> StageConfig {
    let mut c = StageConfig::micro();
    c.stage = stage;
    c.steps = 6;
    c.batch_size = 4;
    c.lr = 1e-3;
    c.log_every = 1;
    c.checkpoint_every = 0;
    c.data.real = 12;
    c.data.pairs = 3;
    c.data.heldout = 4;
    c.model.dit = DitConfig {
        blocks: 3,
        width: 16,
        heads: 2,
        patch: 2,
        mlp_ratio: 2,
        text_len: 24,
    };
    c.model.text_heads = 2;
    c.model.feature_channels = 8;
    c.model.adapter_hidden = 8;
    c
}

pub fn test_data(config: &StageConfig) -> Datasets {
    Datasets::generate(config.data.real, config.data.pairs, config.data.seed, &config.data.corpus).unwrap()
}
