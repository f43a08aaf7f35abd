#![allow(dead_code)]

use coco_core::corpus::{leave_one_out_split, synth_generate, InteractionDataset, SynthConfig};
use coco_core::trainer::{TrainConfig, Variant};

pub fn tiny_data(seed: u64) -> InteractionDataset {
    let d = synth_generate(&SynthConfig::new(40, 30, 4, 0.9, seed)).unwrap();
    leave_one_out_split(&d).unwrap()
}

/// Small enough for finite differences and multi-step runs in debug builds.
pub fn tiny_config(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.variant = variant;
    c.batch_size = 8;
    c.epochs = 1;
    c.k = 4;
    c.d_rs = 8;
    c.d_a = 8;
    c.rs_heads = 2;
    c.d_user = 4;
    c.d_llm = 8;
    c.lm_heads = 2;
    c.lm_layers = 1;
    c.lm_max_len = 24;
    c.lora_rank = 2;
    c.lora_dropout = 0.0;
    c.t_max = 6;
    c.t_text = 2;
    c
}
