#![allow(dead_code)]
pub mod ops;

use tailshare::pipeline::{prepare, PipelineConfig, Prepared};

pub const SMALL_TOML: &str = include_str!("../../../../configs/small.toml");

pub fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(SMALL_TOML).expect("small config parses");
    cfg.seed = seed;
    cfg
}

/// A corpus of a few dozen entities, small enough for full-model gradient
/// checks.
pub fn tiny_config(seed: u64) -> PipelineConfig {
    let mut cfg = small_config(seed);
    cfg.data.num_users = 60;
    cfg.data.num_items = 40;
    cfg.data.num_events = 1500;
    cfg.data.user_threshold = 20;
    cfg.data.item_threshold = 30;
    cfg.quantize.user.codebook_sizes = vec![3, 3, 3];
    cfg.quantize.item.codebook_sizes = vec![3, 3, 3];
    cfg.train.model.seq_len = 6;
    cfg.train.model.cluster_seq_len = 8;
    cfg.train.model.fusion_dim = 6;
    cfg.train.model.ranker_hidden = 5;
    cfg.train.model.gate_hidden = 3;
    cfg.train.model.emb_dim = 4;
    cfg
}

pub fn small(seed: u64) -> (PipelineConfig, Prepared) {
    let cfg = small_config(seed);
    let p = prepare(&cfg).expect("small corpus builds");
    (cfg, p)
}

pub fn tiny(seed: u64) -> (PipelineConfig, Prepared) {
    let cfg = tiny_config(seed);
    let p = prepare(&cfg).expect("tiny corpus builds");
    (cfg, p)
}
