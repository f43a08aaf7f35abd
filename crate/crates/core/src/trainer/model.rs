use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{TrainConfig, Variant};
use crate::backbone::{batched_info_nce, Backbone, BackboneConfig};
use crate::contradiction::{decision_mask, gradient_mask, total_loss, LossBundle, LossTerms};
use crate::corpus::{Batch, InteractionDataset};
use crate::diffcore::{DiffError, Graph, ParamId, ParameterRegistry, Tensor, Var};
use crate::error::{CocoError, Result};
use crate::fusion::{
    align, alternative_fusion, decouple, orthogonality_loss, pooled_knowledge, AltFusionParams, FusionConfig,
    FusionParams, FusionStrategy,
};
use crate::layers::Segment;
use crate::promptvq::{
    assemble_prompt, init_codebook, load_seed_prompts, quantization_loss, score_prompts, select_prompts,
    PromptCodebook, PromptSelection, UserEncoder, SHARED_TEXTS,
};
use crate::toylm::{warmup, LmConfig, LoraConfig, LoraSet, Tokenizer, ToyLm};

/// Language-model side of the model; absent for `backbone_only`.
#[derive(Debug, Clone)]
pub struct LlmPath {
    pub lm: ToyLm,
    pub lora: LoraSet,
    pub codebook: PromptCodebook,
    pub user_enc: Option<UserEncoder>,
    pub fusion: FusionParams,
    pub alt: Option<AltFusionParams>,
}

#[derive(Debug)]
pub struct CocoModel {
    pub cfg: TrainConfig,
    pub registry: ParameterRegistry,
    pub tokenizer: Tokenizer,
    pub titles: Vec<String>,
    pub n_users: usize,
    pub catalog_fingerprint: String,
    pub backbone: Backbone,
    pub llm: Option<LlmPath>,
    text_cache: Mutex<HashMap<Vec<usize>, Arc<Tensor>>>,
}

/// Forward products for a set of `(user, prefix)` rows.
#[derive(Debug, Clone)]
pub struct Representation {
    pub h_rs: Var,
    pub h_aligned: Option<Var>,
    pub e_u: Option<Var>,
    pub selections: Vec<PromptSelection>,
    pub h_pure: Vec<Var>,
}

/// Overrides that hold the non-differentiable decisions of a step fixed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decisions {
    pub selections: Option<Vec<Vec<usize>>>,
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringRows {
    pub vectors: Tensor,
    pub selections: Vec<PromptSelection>,
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub bundle: LossBundle,
    pub mask: Option<Vec<bool>>,
    pub selections: Vec<PromptSelection>,
}

fn named(term: &'static str) -> impl Fn(CocoError) -> CocoError {
    move |e| match e {
        CocoError::Diff(DiffError::NonFinite { .. }) => CocoError::NonFiniteLoss(term),
        other => other,
    }
}

impl CocoModel {
    /// Fresh model for `d`, seeded from `cfg.seed`.
    pub fn build(cfg: &TrainConfig, d: &InteractionDataset) -> Result<Self> {
        let titles: Vec<String> = d.catalog.iter().map(|m| m.title.clone()).collect();
        Self::assemble(cfg, titles, d.n_users(), d.catalog_fingerprint(), None)
    }

    /// Builds the parameter layout; with `tokenizer` given (checkpoint
    /// restore) warm-up and codebook encoding are skipped because every
    /// value is overwritten afterwards.
    pub(crate) fn assemble(
        cfg: &TrainConfig,
        titles: Vec<String>,
        n_users: usize,
        catalog_fingerprint: String,
        tokenizer: Option<Tokenizer>,
    ) -> Result<Self> {
        cfg.validate()?;
        let restoring = tokenizer.is_some();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut registry = ParameterRegistry::new();
        let bcfg = BackboneConfig {
            n_items: titles.len(),
            d_rs: cfg.d_rs,
            t_max: cfg.t_max,
            n_blocks: cfg.rs_blocks,
            n_heads: cfg.rs_heads,
        };
        let backbone = Backbone::new(&mut registry, bcfg, &mut rng)?;
        let seeds = if !cfg.variant.uses_llm() || restoring {
            Vec::new()
        } else if cfg.seed_prompts.is_empty() {
            load_seed_prompts(None)?
        } else {
            load_seed_prompts(Some(std::path::Path::new(&cfg.seed_prompts)))?
        };
        let tokenizer = match tokenizer {
            Some(t) => t,
            None => Tokenizer::build(
                titles
                    .iter()
                    .map(String::as_str)
                    .chain(seeds.iter().map(String::as_str))
                    .chain(SHARED_TEXTS),
            ),
        };
        let llm = if cfg.variant.uses_llm() {
            Some(Self::build_llm(cfg, &mut registry, &tokenizer, &titles, &seeds, n_users, restoring, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            registry,
            tokenizer,
            titles,
            n_users,
            catalog_fingerprint,
            backbone,
            llm,
            text_cache: Mutex::new(HashMap::new()),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn build_llm(
        cfg: &TrainConfig,
        registry: &mut ParameterRegistry,
        tokenizer: &Tokenizer,
        titles: &[String],
        seeds: &[String],
        n_users: usize,
        restoring: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<LlmPath> {
        let lm_cfg = LmConfig {
            vocab_size: tokenizer.vocab_size(),
            d_llm: cfg.d_llm,
            n_layers: cfg.lm_layers,
            n_heads: cfg.lm_heads,
            max_len: cfg.lm_max_len,
            ffn_mult: 4,
        };
        let lm = ToyLm::new(registry, lm_cfg.clone(), rng)?;
        if cfg.warmup_steps > 0 && !restoring {
            let texts: Vec<&str> = titles.iter().map(String::as_str).collect();
            warmup(registry, &lm, tokenizer, &texts, cfg.warmup_steps, cfg.warmup_lr, cfg.seed)?;
        }
        lm.freeze(registry);
        let lora_cfg = LoraConfig {
            rank: cfg.lora_rank,
            alpha: cfg.lora_alpha,
            dropout: cfg.lora_dropout,
        };
        let lora = LoraSet::new(registry, &lm_cfg, lora_cfg, rng)?;
        let k = cfg.effective_k();
        let (private, shared) = if restoring {
            (Tensor::filled(k, cfg.d_llm, 1.0), Tensor::filled(cfg.s, cfg.d_llm, 1.0))
        } else {
            init_codebook(registry, &lm, tokenizer, k, cfg.s, seeds, &SHARED_TEXTS, rng)?
        };
        let codebook = PromptCodebook::register(registry, private, shared)?;
        let user_enc = if cfg.variant.uses_selection() {
            Some(UserEncoder::new(registry, n_users, cfg.d_user, cfg.d_rs, cfg.d_llm, rng)?)
        } else {
            None
        };
        let fcfg = FusionConfig {
            d_llm: cfg.d_llm,
            d_rs: cfg.d_rs,
            d_a: cfg.d_a,
            decouple_heads: cfg.decouple_heads,
            align_heads: cfg.align_heads,
        };
        let fusion = FusionParams::new(registry, fcfg, rng)?;
        let alt = match cfg.variant {
            Variant::FuseMlp => Some(AltFusionParams::new(registry, FusionStrategy::Mlp, fcfg, rng)?),
            Variant::FuseConcat => Some(AltFusionParams::new(registry, FusionStrategy::Concat, fcfg, rng)?),
            _ => None,
        };
        Ok(LlmPath {
            lm,
            lora,
            codebook,
            user_enc,
            fusion,
            alt,
        })
    }

    pub fn n_items(&self) -> usize {
        self.titles.len()
    }

    /// Parameter ids of the LoRA adapters.
    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.llm.as_ref().map(|l| l.lora.ids()).unwrap_or_default()
    }

    /// Parameter ids of the frozen base language model.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.llm.as_ref().map(|l| l.lm.base_ids()).unwrap_or_default()
    }

    fn text_for(&self, registry: &ParameterRegistry, prefix: &[usize]) -> Result<Arc<Tensor>> {
        let llm = self.llm.as_ref().expect("language path present");
        let key = prefix[prefix.len().saturating_sub(self.cfg.t_text)..].to_vec();
        if let Some(t) = self.text_cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let titles: Vec<&str> = key.iter().map(|&i| self.titles[i].as_str()).collect();
        let h = Arc::new(llm.lm.encode_titles(registry, &self.tokenizer, &titles, self.cfg.text_budget())?);
        self.text_cache
            .lock()
            .expect("cache lock")
            .insert(key, Arc::clone(&h));
        Ok(h)
    }

    /// Drops cached title encodings; needed only if base weights change.
    pub fn clear_text_cache(&self) {
        self.text_cache.lock().expect("cache lock").clear();
    }

    fn truncate<'p>(&self, prefixes: &[&'p [usize]]) -> Vec<&'p [usize]> {
        prefixes
            .iter()
            .map(|p| &p[p.len().saturating_sub(self.cfg.t_max)..])
            .collect()
    }

    /// Runs backbone, prompt selection, language model and fusion. Only the
    /// graph's registry is read, so a detached registry can be probed.
    pub fn represent(
        &self,
        g: &mut Graph<'_>,
        users: &[usize],
        prefixes: &[&[usize]],
        frozen_selection: Option<&[Vec<usize>]>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Representation> {
        let prefixes = self.truncate(prefixes);
        let h_rs = self.backbone.encode_prefixes(g, &prefixes)?;
        let Some(llm) = &self.llm else {
            return Ok(Representation {
                h_rs,
                h_aligned: None,
                e_u: None,
                selections: Vec::new(),
                h_pure: Vec::new(),
            });
        };
        let b = users.len();
        let table = self.backbone.item_table(g);
        let (e_u, selections) = match &llm.user_enc {
            Some(enc) => {
                let e = enc.encode(g, table, users, &prefixes)?;
                let codes = g.params().value(llm.codebook.private).clone();
                let ev = g.value(e).clone();
                let mut sels = Vec::with_capacity(b);
                for r in 0..b {
                    let mut s = score_prompts(ev.row_slice(r), &codes)?;
                    s = match frozen_selection {
                        Some(f) => {
                            s.selected = f[r].clone();
                            s.m = s.selected.len();
                            s
                        }
                        None => select_prompts(s, self.cfg.theta)?,
                    };
                    sels.push(s);
                }
                (Some(e), sels)
            }
            None => {
                let fixed = PromptSelection {
                    scores: vec![1.0],
                    raw_cos: vec![1.0],
                    selected: vec![0],
                    m: 1,
                };
                (None, vec![fixed; b])
            }
        };

        let mut prompts = Vec::with_capacity(b);
        let mut inputs = Vec::with_capacity(b);
        let mut segments = Vec::with_capacity(b);
        let mut start = 0;
        for r in 0..b {
            let text = self.text_for(g.params(), prefixes[r])?;
            let text = g.constant((*text).clone());
            let a = assemble_prompt(g, &selections[r], &llm.codebook, text, self.cfg.lm_max_len, None)?;
            prompts.push(a.h_prompt);
            inputs.push(a.h_l);
            segments.push(Segment::full(start, a.valid_len));
            start += a.valid_len;
        }
        let stacked = g.concat_rows(&inputs)?;
        let mix = llm.lm.forward(g, stacked, &segments, Some(&llm.lora), rng)?;

        let mut h_pure = Vec::with_capacity(b);
        let mut aligned = Vec::with_capacity(b);
        for r in 0..b {
            let s = segments[r];
            let h_mix = g.slice_rows(mix, s.start, s.start + s.len)?;
            let pure = if self.cfg.variant == Variant::Dec {
                pooled_knowledge(g, &llm.fusion, h_mix, s.valid)?
            } else {
                decouple(g, &llm.fusion, prompts[r], h_mix, s.valid)?
            };
            let rs = g.slice_rows(h_rs, r, r + 1)?;
            let out = match &llm.alt {
                Some(alt) => alternative_fusion(g, alt, rs, pure)?,
                None => align(g, &llm.fusion, rs, pure)?,
            };
            h_pure.push(pure);
            aligned.push(out);
        }
        let h_aligned = g.concat_rows(&aligned)?;
        Ok(Representation {
            h_rs,
            h_aligned: Some(h_aligned),
            e_u,
            selections,
            h_pure,
        })
    }

    /// Per-row decision mask against the target embeddings in the graph.
    pub fn decisions_for(&self, g: &mut Graph<'_>, rep: &Representation, targets: &[usize]) -> Result<Option<Vec<bool>>> {
        let Some(h_al) = rep.h_aligned else { return Ok(None) };
        if self.cfg.variant == Variant::Con {
            return Ok(Some(vec![true; targets.len()]));
        }
        let table = self.backbone.item_table(g);
        let v = g.gather_rows(table, targets)?;
        Ok(Some(decision_mask(g.value(h_al), g.value(rep.h_rs), g.value(v))?))
    }

    /// The training objective of one batch.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        batch: &Batch,
        fixed: &Decisions,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LossOutput> {
        let prefixes: Vec<&[usize]> = (0..batch.len()).map(|r| batch.prefix(r)).collect();
        let rep = self.represent(g, &batch.users, &prefixes, fixed.selections.as_deref(), rng)?;
        let table = self.backbone.item_table(g);
        let tau = self.cfg.tau;
        let zero = |g: &mut Graph<'_>| g.constant(Tensor::scalar(0.0));
        let Some(h_al) = rep.h_aligned else {
            let l_r = batched_info_nce(g, rep.h_rs, table, &batch.targets, &batch.negatives, tau).map_err(named("L_r"))?;
            let terms = LossTerms {
                l_r,
                l_aux: zero(g),
                l_ortho: zero(g),
                l_q: zero(g),
            };
            let (total, bundle) = total_loss(g, terms, self.cfg.weights())?;
            return Ok(LossOutput {
                total,
                bundle,
                mask: None,
                selections: rep.selections,
            });
        };
        let llm = self.llm.as_ref().expect("language path present");
        let mask = match &fixed.mask {
            Some(m) => Some(m.clone()),
            None => self.decisions_for(g, &rep, &batch.targets)?,
        };
        let m = mask.clone().expect("aligned path has a mask");
        let u = if self.cfg.gradient_mask || self.cfg.variant == Variant::Con {
            gradient_mask(g, h_al, &m)?
        } else {
            h_al
        };
        let l_r = batched_info_nce(g, u, table, &batch.targets, &batch.negatives, tau).map_err(named("L_r"))?;
        let l_aux =
            batched_info_nce(g, rep.h_rs, table, &batch.targets, &batch.negatives, tau).map_err(named("L_aux"))?;
        let (l_ortho, l_q) = match rep.e_u {
            Some(e_u) => {
                let z = g.param(llm.codebook.private);
                let lo = orthogonality_loss(g, z).map_err(named("L_ortho"))?;
                let lq = quantization_loss(g, e_u, &rep.selections, &llm.codebook).map_err(named("L_Q"))?;
                (lo, lq)
            }
            None => (zero(g), zero(g)),
        };
        let terms = LossTerms {
            l_r,
            l_aux,
            l_ortho,
            l_q,
        };
        let (total, bundle) = total_loss(g, terms, self.cfg.weights())?;
        Ok(LossOutput {
            total,
            bundle,
            mask,
            selections: rep.selections,
        })
    }

    /// Scoring vectors (`h_aligned`, or `h_RS` without a language path) for
    /// each row. With `targets` the decision mask is returned too, and
    /// `apply_mask` routes the vectors through the gradient mask, which
    /// leaves their values unchanged.
    pub fn user_vectors(
        &self,
        users: &[usize],
        prefixes: &[&[usize]],
        targets: Option<&[usize]>,
        apply_mask: bool,
    ) -> Result<ScoringRows> {
        let mut g = Graph::new(&self.registry);
        let rep = self.represent(&mut g, users, prefixes, None, None)?;
        let mask = match targets {
            Some(t) => self.decisions_for(&mut g, &rep, t)?,
            None => None,
        };
        let out = match (rep.h_aligned, &mask) {
            (None, _) => rep.h_rs,
            (Some(h), Some(m)) if apply_mask => gradient_mask(&mut g, h, m)?,
            (Some(h), _) => h,
        };
        Ok(ScoringRows {
            vectors: g.value(out).clone(),
            selections: rep.selections,
            mask,
        })
    }

    /// `h_RS` and the per-row `h_pure` matrices, for embedding dumps.
    pub fn embeddings(&self, users: &[usize], prefixes: &[&[usize]]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new(&self.registry);
        let rep = self.represent(&mut g, users, prefixes, None, None)?;
        let pure = rep.h_pure.iter().map(|&v| g.value(v).clone()).collect();
        Ok((g.value(rep.h_rs).clone(), pure))
    }
}
