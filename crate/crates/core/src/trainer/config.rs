use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::contradiction::LossWeights;
use crate::error::{CocoError, Result};

/// Model variant trained by [`crate::trainer::fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    Soft,
    Dec,
    Con,
    FuseMlp,
    FuseConcat,
    BackboneOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::Soft,
        Variant::Dec,
        Variant::Con,
        Variant::FuseMlp,
        Variant::FuseConcat,
        Variant::BackboneOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Soft => "soft",
            Variant::Dec => "dec",
            Variant::Con => "con",
            Variant::FuseMlp => "fuse_mlp",
            Variant::FuseConcat => "fuse_concat",
            Variant::BackboneOnly => "backbone_only",
        }
    }

    pub fn uses_llm(self) -> bool {
        self != Variant::BackboneOnly
    }

    pub fn uses_selection(self) -> bool {
        !matches!(self, Variant::Soft | Variant::BackboneOnly)
    }
}

impl FromStr for Variant {
    type Err = CocoError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CocoError::Config(format!("unknown variant `{s}`")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every run setting. The text form is one `key = value` per line; floats
/// are written in shortest round-trip form, so parsing the text back gives
/// an identical config.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub lr_lora: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub tau: f64,
    pub theta: f64,
    pub k: usize,
    pub s: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lora_alpha: f64,
    pub lora_rank: usize,
    pub lora_dropout: f64,
    pub t_max: usize,
    pub t_text: usize,
    pub d_rs: usize,
    pub rs_blocks: usize,
    pub rs_heads: usize,
    pub d_user: usize,
    pub d_a: usize,
    pub decouple_heads: usize,
    pub align_heads: usize,
    pub d_llm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_max_len: usize,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub gradient_mask: bool,
    pub eval_ks: Vec<usize>,
    pub seed_prompts: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            seed: 0,
            variant: Variant::Full,
            batch_size: 64,
            epochs: 20,
            patience: 5,
            lr: 1e-3,
            lr_lora: 1e-3,
            weight_decay: 0.0,
            clip_norm: 5.0,
            tau: 0.07,
            theta: 0.45,
            k: 64,
            s: 2,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            lora_alpha: 16.0,
            lora_rank: 8,
            lora_dropout: 0.05,
            t_max: 50,
            t_text: 10,
            d_rs: 128,
            rs_blocks: 2,
            rs_heads: 4,
            d_user: 32,
            d_a: 128,
            decouple_heads: 1,
            align_heads: 1,
            d_llm: 64,
            lm_layers: 2,
            lm_heads: 2,
            lm_max_len: 128,
            warmup_steps: 0,
            warmup_lr: 1e-3,
            gradient_mask: true,
            eval_ks: vec![5, 10],
            seed_prompts: String::new(),
        }
    }
}

/// Documented keys with a one-line description, in serialization order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "master random seed"),
    ("variant", "full | soft | dec | con | fuse_mlp | fuse_concat | backbone_only"),
    ("batch_size", "rows per training batch (>= 2)"),
    ("epochs", "maximum training epochs"),
    ("patience", "epochs without valid R@5 improvement before stopping"),
    ("lr", "learning rate of backbone, fusion, codebook and user encoder"),
    ("lr_lora", "learning rate of the LoRA adapters"),
    ("weight_decay", "decoupled weight decay of both groups"),
    ("clip_norm", "global gradient norm bound"),
    ("tau", "InfoNCE temperature"),
    ("theta", "raw-cosine selection threshold in (-1, 1)"),
    ("k", "private codebook size"),
    ("s", "number of shared prompt rows"),
    ("alpha", "weight of the auxiliary backbone loss"),
    ("beta", "weight of the orthogonality loss"),
    ("gamma", "weight of the quantization loss"),
    ("lora_alpha", "LoRA scaling numerator"),
    ("lora_rank", "LoRA rank"),
    ("lora_dropout", "dropout on the LoRA input path"),
    ("t_max", "longest behavior prefix fed to the backbone"),
    ("t_text", "number of recent titles given to the language model"),
    ("d_rs", "backbone embedding dimension"),
    ("rs_blocks", "backbone transformer blocks"),
    ("rs_heads", "backbone attention heads"),
    ("d_user", "user-id embedding dimension of the user encoder"),
    ("d_a", "fusion attention dimension"),
    ("decouple_heads", "heads of the decoupling attention"),
    ("align_heads", "heads of the alignment attention"),
    ("d_llm", "language model hidden dimension"),
    ("lm_layers", "language model layers"),
    ("lm_heads", "language model attention heads"),
    ("lm_max_len", "language model context length"),
    ("warmup_steps", "next-token pretraining steps before freezing (0 = off)"),
    ("warmup_lr", "learning rate of the warm-up"),
    ("gradient_mask", "apply the contradiction gradient mask during training"),
    ("eval_ks", "comma-separated cutoffs for R@K and N@K"),
    ("seed_prompts", "seed prompt file (empty = environment override or bundled list)"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CocoError::Config(format!("cannot parse `{v}` for key `{key}`")))
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    /// Private codebook rows actually used by the variant.
    pub fn effective_k(&self) -> usize {
        if self.variant == Variant::Soft {
            1
        } else {
            self.k
        }
    }

    /// Title tokens that still fit after the largest possible prompt.
    pub fn text_budget(&self) -> usize {
        self.lm_max_len.saturating_sub(self.s + self.effective_k())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_lora" => self.lr_lora = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "s" => self.s = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "lora_alpha" => self.lora_alpha = parse(key, v)?,
            "lora_rank" => self.lora_rank = parse(key, v)?,
            "lora_dropout" => self.lora_dropout = parse(key, v)?,
            "t_max" => self.t_max = parse(key, v)?,
            "t_text" => self.t_text = parse(key, v)?,
            "d_rs" => self.d_rs = parse(key, v)?,
            "rs_blocks" => self.rs_blocks = parse(key, v)?,
            "rs_heads" => self.rs_heads = parse(key, v)?,
            "d_user" => self.d_user = parse(key, v)?,
            "d_a" => self.d_a = parse(key, v)?,
            "decouple_heads" => self.decouple_heads = parse(key, v)?,
            "align_heads" => self.align_heads = parse(key, v)?,
            "d_llm" => self.d_llm = parse(key, v)?,
            "lm_layers" => self.lm_layers = parse(key, v)?,
            "lm_heads" => self.lm_heads = parse(key, v)?,
            "lm_max_len" => self.lm_max_len = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "warmup_lr" => self.warmup_lr = parse(key, v)?,
            "gradient_mask" => self.gradient_mask = parse(key, v)?,
            "eval_ks" => {
                self.eval_ks = v
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "seed_prompts" => self.seed_prompts = v.to_string(),
            other => return Err(CocoError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "variant" => self.variant.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "lr" => self.lr.to_string(),
            "lr_lora" => self.lr_lora.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "tau" => self.tau.to_string(),
            "theta" => self.theta.to_string(),
            "k" => self.k.to_string(),
            "s" => self.s.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "lora_alpha" => self.lora_alpha.to_string(),
            "lora_rank" => self.lora_rank.to_string(),
            "lora_dropout" => self.lora_dropout.to_string(),
            "t_max" => self.t_max.to_string(),
            "t_text" => self.t_text.to_string(),
            "d_rs" => self.d_rs.to_string(),
            "rs_blocks" => self.rs_blocks.to_string(),
            "rs_heads" => self.rs_heads.to_string(),
            "d_user" => self.d_user.to_string(),
            "d_a" => self.d_a.to_string(),
            "decouple_heads" => self.decouple_heads.to_string(),
            "align_heads" => self.align_heads.to_string(),
            "d_llm" => self.d_llm.to_string(),
            "lm_layers" => self.lm_layers.to_string(),
            "lm_heads" => self.lm_heads.to_string(),
            "lm_max_len" => self.lm_max_len.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "warmup_lr" => self.warmup_lr.to_string(),
            "gradient_mask" => self.gradient_mask.to_string(),
            "eval_ks" => self
                .eval_ks
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "seed_prompts" => self.seed_prompts.clone(),
            _ => unreachable!("keys come from CONFIG_KEYS"),
        }
    }

    pub fn to_kv(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    /// Parses `key = value` lines on top of the defaults; `#` starts a
    /// comment line.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CocoError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// First 16 hex digits of the sha256 of [`TrainConfig::to_kv`].
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_kv().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CocoError::Config(m));
        for (n, r) in [("lr", self.lr), ("lr_lora", self.lr_lora), ("warmup_lr", self.warmup_lr)] {
            if !(r > 0.0) || !r.is_finite() {
                return bad(format!("{n} must be > 0, got {r}"));
            }
        }
        if !(self.theta > -1.0 && self.theta < 1.0) {
            return bad(format!("theta {} outside (-1, 1)", self.theta));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau {} must be > 0", self.tau));
        }
        self.weights().validate()?;
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if self.k == 0 || self.s == 0 {
            return bad("k and s must be at least 1".into());
        }
        if self.t_max == 0 || self.t_text == 0 {
            return bad("t_max and t_text must be at least 1".into());
        }
        if self.variant.uses_llm() && self.text_budget() == 0 {
            return bad(format!(
                "lm_max_len {} leaves no room for title tokens after {} prompt rows",
                self.lm_max_len,
                self.s + self.effective_k()
            ));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("weight_decay and clip_norm must be >= 0".into());
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("eval_ks must list positive cutoffs".into());
        }
        if !self.eval_ks.contains(&5) {
            return bad("eval_ks must include 5, the model-selection cutoff".into());
        }
        Ok(())
    }
}
