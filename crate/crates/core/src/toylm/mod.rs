//! A small frozen decoder-only language model with LoRA adapters on the
//! query and value projections.

mod tokenizer;

pub use tokenizer::{Tokenizer, PAD, PAD_ID, SEP, SEP_ID, UNK, UNK_ID};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamId, ParameterRegistry, Tensor, Var};
use crate::error::{CocoError, Result};
use crate::layers::{segmented_self_attention, LayerNormParams, Linear, ParamBuilder, Segment};
use crate::optim::{AdamW, ParamGroup};

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_llm: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 128,
            ffn_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_llm < 8 {
            return Err(CocoError::Config(format!("d_llm {} < 8", self.d_llm)));
        }
        if self.n_heads == 0 || self.d_llm % self.n_heads != 0 {
            return Err(CocoError::Config(format!(
                "d_llm {} is not divisible by {} heads",
                self.d_llm, self.n_heads
            )));
        }
        if self.vocab_size < 3 || self.n_layers == 0 || self.max_len == 0 || self.ffn_mult == 0 {
            return Err(CocoError::Config("language model sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

/// `ΔW = (alpha / rank) · A·B` with `A: d × r`, `B: r × d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize, cfg: LoraConfig) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank > d_in.min(d_out) / 2 {
            return Err(CocoError::Config(format!(
                "LoRA rank {} must lie in [1, {}]",
                cfg.rank,
                d_in.min(d_out) / 2
            )));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(CocoError::Config(format!("LoRA dropout {} outside [0, 1)", cfg.dropout)));
        }
        let a = pb.randn(&format!("{name}.a"), d_in, cfg.rank, (1.0 / d_in as f64).sqrt())?;
        let b = pb.zeros(&format!("{name}.b"), cfg.rank, d_out)?;
        Ok(Self {
            a,
            b,
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
        })
    }

    // x·ΔW with dropout on the adapter input
    fn delta<'r>(&self, g: &mut Graph<'_>, x: Var, rng: Option<&mut (dyn RngCore + 'r)>) -> Result<Var> {
        let x = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout);
                let v = g.value(x);
                let (m, n) = v.dims();
                let mask: Vec<f64> = (0..m * n)
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                    .collect();
                let mask = g.constant(Tensor::matrix(m, n, mask)?);
                g.mul(x, mask)?
            }
            _ => x,
        };
        let a = g.param(self.a);
        let b = g.param(self.b);
        let xa = g.matmul(x, a)?;
        let xab = g.matmul(xa, b)?;
        Ok(g.scale(xab, self.scale())?)
    }
}

/// Returns `W + (alpha / rank) · A·B`.
pub fn lora_apply(g: &mut Graph<'_>, w: Var, adapter: &LoraAdapter) -> Result<Var> {
    if adapter.rank == 0 {
        return Err(CocoError::Model("LoRA rank must be at least 1".into()));
    }
    let a = g.param(adapter.a);
    let b = g.param(adapter.b);
    let ab = g.matmul(a, b)?;
    if g.value(ab).shape() != g.value(w).shape() {
        return Err(CocoError::Model(format!(
            "LoRA update {:?} does not match weight {:?}",
            g.value(ab).shape(),
            g.value(w).shape()
        )));
    }
    let d = g.scale(ab, adapter.scale())?;
    Ok(g.add(w, d)?)
}

/// Adapters on the query and value projection of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    pub q: Vec<LoraAdapter>,
    pub v: Vec<LoraAdapter>,
}

impl LoraSet {
    pub fn new<R: Rng>(registry: &mut ParameterRegistry, lm: &LmConfig, cfg: LoraConfig, rng: &mut R) -> Result<Self> {
        let d = lm.d_llm;
        let mut pb = ParamBuilder::new(registry, rng, "lora", false);
        let mut q = Vec::with_capacity(lm.n_layers);
        let mut v = Vec::with_capacity(lm.n_layers);
        for l in 0..lm.n_layers {
            q.push(LoraAdapter::new(&mut pb, &format!("layer{l}.q"), d, d, cfg)?);
            v.push(LoraAdapter::new(&mut pb, &format!("layer{l}.v"), d, d, cfg)?);
        }
        Ok(Self { q, v })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.q.iter().chain(&self.v).flat_map(|a| [a.a, a.b]).collect()
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: LayerNormParams,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
}

/// Parameter handles of the base model.
#[derive(Debug, Clone)]
pub struct ToyLm {
    pub cfg: LmConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    layers: Vec<Layer>,
    final_ln: LayerNormParams,
}

impl ToyLm {
    /// Registers the base weights as trainable so an optional warm-up can
    /// run; call [`ToyLm::freeze`] before any downstream training.
    pub fn new<R: Rng>(registry: &mut ParameterRegistry, cfg: LmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_llm;
        let mut pb = ParamBuilder::new(registry, rng, "lm", false);
        let tok_emb = pb.randn("tok_emb", cfg.vocab_size, d, 1.0)?;
        let pos_emb = pb.randn("pos_emb", cfg.max_len, d, 0.1)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            layers.push(Layer {
                ln1: pb.layer_norm(&format!("layer{l}.ln1"), d)?,
                wq: pb.linear(&format!("layer{l}.wq"), d, d, false)?,
                wk: pb.linear(&format!("layer{l}.wk"), d, d, false)?,
                wv: pb.linear(&format!("layer{l}.wv"), d, d, false)?,
                wo: pb.linear(&format!("layer{l}.wo"), d, d, false)?,
                ln2: pb.layer_norm(&format!("layer{l}.ln2"), d)?,
                ff1: pb.linear(&format!("layer{l}.ff1"), d, cfg.ffn_mult * d, true)?,
                ff2: pb.linear(&format!("layer{l}.ff2"), cfg.ffn_mult * d, d, true)?,
            });
        }
        let final_ln = pb.layer_norm("final_ln", d)?;
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            layers,
            final_ln,
        })
    }

    pub fn base_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            ids.extend([l.ln1.gain, l.ln1.bias, l.ln2.gain, l.ln2.bias]);
            for lin in [&l.wq, &l.wk, &l.wv, &l.wo, &l.ff1, &l.ff2] {
                ids.extend(lin.ids());
            }
        }
        ids.extend([self.final_ln.gain, self.final_ln.bias]);
        ids
    }

    pub fn freeze(&self, registry: &mut ParameterRegistry) {
        for id in self.base_ids() {
            registry.freeze(id);
        }
    }

    pub fn embed_tokens(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.tok_emb);
        Ok(g.gather_rows(t, ids)?)
    }

    /// Runs the decoder over pre-embedded rows `x`; each segment is an
    /// independent causal sequence starting at position 0.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        segments: &[Segment],
        lora: Option<&LoraSet>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        let mut positions = Vec::with_capacity(n);
        let mut next = 0;
        for s in segments {
            if s.start != next || s.len == 0 || s.valid == 0 || s.valid > s.len {
                return Err(CocoError::Model("segments must tile the input".into()));
            }
            if s.len > self.cfg.max_len {
                return Err(CocoError::Model(format!(
                    "sequence length {} exceeds context {}",
                    s.len, self.cfg.max_len
                )));
            }
            positions.extend(0..s.len);
            next += s.len;
        }
        if next != n {
            return Err(CocoError::Model("segments must tile the input".into()));
        }
        let pos = g.param(self.pos_emb);
        let pe = g.gather_rows(pos, &positions)?;
        let mut x = g.add(x, pe)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.ln1.forward(g, x)?;
            let mut q = layer.wq.forward(g, h)?;
            let k = layer.wk.forward(g, h)?;
            let mut v = layer.wv.forward(g, h)?;
            if let Some(set) = lora {
                let dq = set.q[l].delta(g, h, rng.as_deref_mut())?;
                q = g.add(q, dq)?;
                let dv = set.v[l].delta(g, h, rng.as_deref_mut())?;
                v = g.add(v, dv)?;
            }
            let a = segmented_self_attention(g, q, k, v, segments, self.cfg.n_heads)?;
            let a = layer.wo.forward(g, a)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, x)?;
            let f = layer.ff1.forward(g, h)?;
            let f = g.gelu(f)?;
            let f = layer.ff2.forward(g, f)?;
            x = g.add(x, f)?;
        }
        Ok(self.final_ln.forward(g, x)?)
    }

    /// Final hidden states over `h_l`; keys at positions `>= valid_len`
    /// are masked.
    pub fn forward_with_prefix(
        &self,
        g: &mut Graph<'_>,
        h_l: Var,
        valid_len: usize,
        lora: Option<&LoraSet>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let len = g.value(h_l).rows();
        if len > self.cfg.max_len {
            return Err(CocoError::Model(format!(
                "input of {len} rows exceeds context {}",
                self.cfg.max_len
            )));
        }
        if valid_len == 0 || valid_len > len {
            return Err(CocoError::Model(format!("valid length {valid_len} outside [1, {len}]")));
        }
        let seg = Segment {
            start: 0,
            len,
            valid: valid_len,
        };
        self.forward(g, h_l, &[seg], lora, rng)
    }

    /// Final hidden states of a token sequence under the base weights.
    pub fn encode_ids(&self, registry: &ParameterRegistry, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(CocoError::Model("no tokens to encode".into()));
        }
        let ids = &ids[ids.len().saturating_sub(self.cfg.max_len)..];
        let mut g = Graph::new(registry);
        let x = self.embed_tokens(&mut g, ids)?;
        let h = self.forward(&mut g, x, &[Segment::full(0, ids.len())], None, None)?;
        Ok(g.value(h).clone())
    }

    /// `h_text` for a title list ordered oldest first.
    pub fn encode_titles(
        &self,
        registry: &ParameterRegistry,
        tokenizer: &Tokenizer,
        titles: &[&str],
        max_tokens: usize,
    ) -> Result<Tensor> {
        if titles.is_empty() {
            return Err(CocoError::Model("need at least one title".into()));
        }
        let ids = tokenizer.encode_titles(titles, max_tokens)?;
        self.encode_ids(registry, &ids)
    }

    /// One mean-pooled final hidden state per text.
    pub fn encode_text_for_init(
        &self,
        registry: &ParameterRegistry,
        tokenizer: &Tokenizer,
        texts: &[&str],
    ) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(CocoError::Model("no texts to encode".into()));
        }
        let mut rows = Vec::with_capacity(texts.len());
        for t in texts {
            let ids = tokenizer.encode(t);
            if ids.is_empty() {
                return Err(CocoError::Model(format!("text {t:?} has no tokens")));
            }
            let h = self.encode_ids(registry, &ids)?;
            let n = h.rows() as f64;
            let mut mean = vec![0.0; h.cols()];
            for r in 0..h.rows() {
                for (m, v) in mean.iter_mut().zip(h.row_slice(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            rows.push(mean);
        }
        Ok(Tensor::from_rows(&rows)?)
    }

    /// Mean next-token cross-entropy with the output head tied to the token
    /// embeddings.
    pub fn next_token_loss(&self, g: &mut Graph<'_>, sequences: &[Vec<usize>]) -> Result<Var> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut segments = Vec::new();
        for s in sequences.iter().filter(|s| s.len() >= 2) {
            let s = &s[s.len().saturating_sub(self.cfg.max_len + 1)..];
            segments.push(Segment::full(inputs.len(), s.len() - 1));
            inputs.extend_from_slice(&s[..s.len() - 1]);
            targets.extend_from_slice(&s[1..]);
        }
        if inputs.is_empty() {
            return Err(CocoError::Model("no sequence has two or more tokens".into()));
        }
        let x = self.embed_tokens(g, &inputs)?;
        let h = self.forward(g, x, &segments, None, None)?;
        let table = g.param(self.tok_emb);
        let logits = g.matmul_nt(h, table)?;
        let lp = g.log_softmax_rows(logits)?;
        let n = targets.len();
        let v = self.cfg.vocab_size;
        let mut pick = Tensor::zeros(n, v);
        for (r, &t) in targets.iter().enumerate() {
            pick.data_mut()[r * v + t] = -1.0 / n as f64;
        }
        let pick = g.constant(pick);
        let picked = g.mul(lp, pick)?;
        Ok(g.sum(picked)?)
    }
}

/// Next-token pretraining of the base weights on `texts`; returns the loss
/// of the first and last step.
pub fn warmup(
    registry: &mut ParameterRegistry,
    lm: &ToyLm,
    tokenizer: &Tokenizer,
    texts: &[&str],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let seqs: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| tokenizer.encode(t))
        .filter(|s| s.len() >= 2)
        .collect();
    if seqs.is_empty() || steps == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::default();
    let groups = [ParamGroup {
        ids: lm.base_ids(),
        lr,
        weight_decay: 0.0,
    }];
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..steps {
        let batch: Vec<Vec<usize>> = (0..16.min(seqs.len()))
            .map(|_| seqs[rng.random_range(0..seqs.len())].clone())
            .collect();
        let (loss, grads) = {
            let mut g = Graph::new(registry);
            let l = lm.next_token_loss(&mut g, &batch)?;
            let v = g.scalar(l)?;
            (v, g.backward(l)?.into_params())
        };
        if step == 0 {
            first = loss;
        }
        last = loss;
        opt.step(registry, &grads, &groups);
    }
    Ok((first, last))
}
