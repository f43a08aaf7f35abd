//! Fixtures shared by the pipeline benchmarks.

use coco_core::corpus::{leave_one_out_split, make_batches, synth_generate, Batch, InteractionDataset, SynthConfig};
use coco_core::trainer::{TrainConfig, TrainState, Variant};

pub fn dataset(users: usize, items: usize) -> InteractionDataset {
    let d = synth_generate(&SynthConfig::new(users, items, 8, 0.9, 0)).expect("synthetic data");
    leave_one_out_split(&d).expect("split")
}

/// Dimensions small enough that one step takes milliseconds.
pub fn small_config(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.variant = variant;
    c.batch_size = 32;
    c.k = 16;
    c.d_rs = 32;
    c.d_a = 32;
    c.d_llm = 16;
    c.d_user = 16;
    c.t_max = 10;
    c.t_text = 3;
    c.lm_max_len = 48;
    c
}

pub fn state_and_batch(variant: Variant, d: &InteractionDataset) -> (TrainState, Batch) {
    let cfg = small_config(variant);
    let s = TrainState::new(&cfg, d).expect("state");
    let b = make_batches(d, cfg.batch_size, cfg.t_max, 0).expect("batches").next().expect("one batch");
    (s, b)
}
