//! Finite-difference checks of every differentiable building block on toy
//! shapes (d ≤ 16, K ≤ 8, B ≤ 4), in a fixed order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{batched_info_nce, Backbone, BackboneConfig};
use crate::corpus::{leave_one_out_split, make_batches, synth_generate, Batch, SynthConfig};
use crate::diffcore::{finite_diff_check, CheckOptions, GradCheckReport, Graph, ParamId, ParameterRegistry, Tensor, Var};
use crate::error::{CocoError, Result};
use crate::fusion::{align, decouple, orthogonality_loss, FusionConfig, FusionParams};
use crate::layers::ParamBuilder;
use crate::promptvq::{quantization_loss, score_prompts, select_prompts, PromptCodebook, PromptSelection};
use crate::toylm::{lora_apply, LoraAdapter, LoraConfig};
use crate::trainer::{CocoModel, Decisions, TrainConfig, Variant};

/// Loss terms checked on their own.
pub const TERM_TOL: f64 = 1e-5;
/// Composite blocks and the full objective.
pub const COMPOSITE_TOL: f64 = 1e-4;

pub const CHECKS: [&str; 8] = ["l_r", "l_aux", "l_ortho", "l_q", "decouple", "align", "lora_apply", "l_total"];

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub check: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Runs `scope` (`all` or one name from [`CHECKS`]).
pub fn run_gradsuite(scope: &str) -> Result<Vec<SuiteEntry>> {
    let names: Vec<&'static str> = if scope == "all" {
        CHECKS.to_vec()
    } else {
        let n = CHECKS
            .iter()
            .find(|&&c| c == scope)
            .ok_or_else(|| CocoError::Config(format!("unknown gradcheck scope `{scope}` (all | {})", CHECKS.join(" | "))))?;
        vec![*n]
    };
    names.into_iter().map(|n| Ok(SuiteEntry { check: n, report: run_one(n)? })).collect()
}

fn run_one(name: &str) -> Result<GradCheckReport> {
    match name {
        "l_r" => check_l_r(),
        "l_aux" => check_l_aux(),
        "l_ortho" => check_l_ortho(),
        "l_q" => check_l_q(),
        "decouple" => check_decouple(),
        "align" => check_align(),
        "lora_apply" => check_lora_apply(),
        "l_total" => check_l_total(),
        _ => unreachable!("names come from CHECKS"),
    }
}

fn opts(tol: f64) -> CheckOptions {
    CheckOptions {
        tol,
        ..CheckOptions::default()
    }
}

// Σ out ⊙ W for a fixed random W, so every output element carries weight
fn weighted_sum(g: &mut Graph<'_>, out: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p)?)
}

fn check_l_r() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut reg = ParameterRegistry::new();
    let u = reg.register("h_aligned", Tensor::randn(4, 8, 0.5, &mut rng), false)?;
    let table = reg.register("item_table", Tensor::randn(10, 8, 0.5, &mut rng), false)?;
    let targets = [1, 4, 1, 7];
    let negatives = vec![vec![4, 7], vec![1, 7], vec![4, 7], vec![1, 4]];
    finite_diff_check(
        &mut reg,
        |g| {
            let (u, t) = (g.param(u), g.param(table));
            batched_info_nce(g, u, t, &targets, &negatives, 0.07)
        },
        None,
        opts(TERM_TOL),
    )
}

fn check_l_aux() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = leave_one_out_split(&synth_generate(&SynthConfig::new(12, 10, 2, 0.9, 3))?)?;
    let batch: Batch = make_batches(&d, 4, 5, 1)?.next().ok_or_else(|| CocoError::Model("no batch".into()))?;
    let mut reg = ParameterRegistry::new();
    let mut bcfg = BackboneConfig::new(d.n_items(), 8, 5);
    bcfg.n_blocks = 1;
    bcfg.n_heads = 2;
    let bb = Backbone::new(&mut reg, bcfg, &mut rng)?;
    perturb_all(&mut reg, &mut rng);
    finite_diff_check(
        &mut reg,
        |g| {
            let h = bb.encode_sequence(g, &batch)?;
            let t = bb.item_table(g);
            batched_info_nce(g, h, t, &batch.targets, &batch.negatives, 0.5)
        },
        None,
        opts(TERM_TOL),
    )
}

// moves zero- or one-initialized tensors (biases, gains) off their
// special values so every path carries a generic gradient
fn perturb_all(reg: &mut ParameterRegistry, rng: &mut ChaCha8Rng) {
    for id in reg.trainable_ids() {
        let (r, c) = reg.value(id).dims();
        let noise = Tensor::randn(r, c, 0.1, rng);
        for (v, n) in reg.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

fn check_l_ortho() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut reg = ParameterRegistry::new();
    let z = reg.register("codebook.private", Tensor::randn(8, 16, 1.0, &mut rng), false)?;
    finite_diff_check(
        &mut reg,
        |g| {
            let z = g.param(z);
            orthogonality_loss(g, z)
        },
        None,
        opts(TERM_TOL),
    )
}

fn check_l_q() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut reg = ParameterRegistry::new();
    let cb = PromptCodebook::register(&mut reg, Tensor::randn(8, 8, 1.0, &mut rng), Tensor::randn(2, 8, 1.0, &mut rng))?;
    let e = Tensor::randn(4, 8, 1.0, &mut rng);
    let sels = (0..4)
        .map(|r| select_prompts(score_prompts(e.row_slice(r), reg.value(cb.private))?, 0.0))
        .collect::<Result<Vec<PromptSelection>>>()?;
    if sels.iter().all(|s| s.m == 0) {
        return Err(CocoError::Model("L_Q check drew no selections".into()));
    }
    let e_u = reg.register("e_u", e, false)?;
    finite_diff_check(
        &mut reg,
        |g| {
            let e = g.param(e_u);
            quantization_loss(g, e, &sels, &cb)
        },
        None,
        opts(TERM_TOL),
    )
}

fn fusion_setup(seed: u64) -> Result<(ParameterRegistry, FusionParams, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParameterRegistry::new();
    let mut fcfg = FusionConfig::new(8, 8);
    fcfg.decouple_heads = 2;
    let p = FusionParams::new(&mut reg, fcfg, &mut rng)?;
    perturb_all(&mut reg, &mut rng);
    Ok((reg, p, rng))
}

fn check_decouple() -> Result<GradCheckReport> {
    let (mut reg, p, mut rng) = fusion_setup(15)?;
    let h_prompt = reg.register("h_prompt", Tensor::randn(3, 8, 1.0, &mut rng), false)?;
    let h_mix = reg.register("h_mix", Tensor::randn(7, 8, 1.0, &mut rng), false)?;
    let w = Tensor::randn(3, 8, 1.0, &mut rng);
    finite_diff_check(
        &mut reg,
        |g| {
            let (hp, hm) = (g.param(h_prompt), g.param(h_mix));
            // the last two rows are padding
            let out = decouple(g, &p, hp, hm, 5)?;
            weighted_sum(g, out, &w)
        },
        None,
        opts(COMPOSITE_TOL),
    )
}

fn check_align() -> Result<GradCheckReport> {
    let (mut reg, p, mut rng) = fusion_setup(16)?;
    let h_rs = reg.register("h_rs", Tensor::randn(1, 8, 1.0, &mut rng), false)?;
    let h_pure = reg.register("h_pure", Tensor::randn(3, 8, 1.0, &mut rng), false)?;
    let w = Tensor::randn(1, 8, 1.0, &mut rng);
    finite_diff_check(
        &mut reg,
        |g| {
            let (r, h) = (g.param(h_rs), g.param(h_pure));
            let out = align(g, &p, r, h)?;
            weighted_sum(g, out, &w)
        },
        None,
        opts(COMPOSITE_TOL),
    )
}

fn check_lora_apply() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut reg = ParameterRegistry::new();
    let w0 = reg.register("base.w", Tensor::randn(8, 12, 0.3, &mut rng), true)?;
    let cfg = LoraConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
    };
    let adapter = {
        let mut pb = ParamBuilder::new(&mut reg, &mut rng, "lora", false);
        LoraAdapter::new(&mut pb, "w", 8, 12, cfg)?
    };
    // B starts at zero; give it a generic value
    *reg.value_mut(adapter.b) = Tensor::randn(2, 12, 0.3, &mut rng);
    let x = Tensor::randn(4, 8, 1.0, &mut rng);
    let w = Tensor::randn(4, 12, 1.0, &mut rng);
    finite_diff_check(
        &mut reg,
        |g| {
            let base = g.param(w0);
            let eff = lora_apply(g, base, &adapter)?;
            let x = g.constant(x.clone());
            let y = g.matmul(x, eff)?;
            let y = g.gelu(y)?;
            weighted_sum(g, y, &w)
        },
        None,
        opts(COMPOSITE_TOL),
    )
}

/// The configuration of the `l_total` check: every block present, with a
/// low gate so several codewords are selected.
pub fn l_total_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.variant = Variant::Full;
    c.batch_size = 4;
    c.k = 4;
    c.s = 2;
    c.theta = 0.0;
    c.d_rs = 8;
    c.d_a = 8;
    c.rs_blocks = 1;
    c.rs_heads = 2;
    c.d_user = 4;
    c.d_llm = 8;
    c.lm_heads = 2;
    c.lm_layers = 1;
    c.lm_max_len = 24;
    c.lora_rank = 2;
    c.lora_dropout = 0.0;
    c.t_max = 5;
    c.t_text = 2;
    c.tau = 0.5;
    c
}

fn check_l_total() -> Result<GradCheckReport> {
    let cfg = l_total_config();
    let d = leave_one_out_split(&synth_generate(&SynthConfig::new(16, 12, 3, 0.9, 5))?)?;
    let batch = make_batches(&d, cfg.batch_size, cfg.t_max, 2)?
        .next()
        .ok_or_else(|| CocoError::Model("no batch".into()))?;
    let mut model = CocoModel::build(&cfg, &d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    // LoRA B and the zero biases would otherwise hide whole gradient paths
    let frozen: Vec<ParamId> = model.frozen_ids();
    for id in model.registry.trainable_ids() {
        if frozen.contains(&id) {
            continue;
        }
        let (r, c) = model.registry.value(id).dims();
        let noise = Tensor::randn(r, c, 0.05, &mut rng);
        for (v, n) in model.registry.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let probe = {
        let mut g = Graph::new(&model.registry);
        model.loss(&mut g, &batch, &Decisions::default(), None)?
    };
    // selections and M held at their probe values; M = 0 keeps the
    // stop-gradient an identity so differences see the same function
    let fixed = Decisions {
        selections: Some(probe.selections.iter().map(|s| s.selected.clone()).collect()),
        mask: Some(vec![false; batch.len()]),
    };
    let mut reg = std::mem::take(&mut model.registry);
    finite_diff_check(&mut reg, |g| Ok::<_, CocoError>(model.loss(g, &batch, &fixed, None)?.total), None, opts(COMPOSITE_TOL))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_scope_is_rejected() {
        assert!(run_gradsuite("l_zz").is_err());
    }
}
