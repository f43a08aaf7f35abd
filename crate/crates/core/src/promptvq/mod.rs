//! Per-user soft prompt selection from a learnable codebook.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{cosine, Graph, ParamId, ParameterRegistry, Tensor, Var};
use crate::error::{CocoError, Result};
use crate::layers::{Linear, ParamBuilder};
use crate::toylm::{Tokenizer, ToyLm};

/// Environment variable naming an alternative seed prompt file.
pub const SEED_PROMPTS_ENV: &str = "COCO_SEED_PROMPTS";
pub const BUNDLED_SEED_PROMPTS: &str = include_str!("../../assets/seed_prompts.txt");
pub const SHARED_TEXTS: [&str; 2] = [
    "recommend the next item this user will enjoy",
    "describe the user's general preferences",
];
const JITTER_STD: f64 = 0.02;
const MIN_NORM: f64 = 1e-8;

/// Handles of the private codebook `Z` (`K × d`) and the shared rows (`S × d`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptCodebook {
    pub private: ParamId,
    pub shared: ParamId,
    pub k: usize,
    pub s: usize,
    pub d: usize,
}

impl PromptCodebook {
    pub fn register(registry: &mut ParameterRegistry, private: Tensor, shared: Tensor) -> Result<Self> {
        let (k, d) = private.dims();
        let (s, ds) = shared.dims();
        if k == 0 || s == 0 || d != ds {
            return Err(CocoError::Config(format!(
                "codebook {k}×{d} and shared prompts {s}×{ds} are inconsistent"
            )));
        }
        let private = registry.register("codebook.private", private, false)?;
        let shared = registry.register("codebook.shared", shared, false)?;
        Ok(Self { private, shared, k, s, d })
    }

    /// Re-draws any codeword whose norm fell below `1e-8`; returns how many.
    pub fn repair<R: Rng>(&self, registry: &mut ParameterRegistry, rng: &mut R) -> usize {
        let mut fixed = 0;
        for id in [self.private, self.shared] {
            let t = registry.value_mut(id);
            for r in 0..t.rows() {
                let row = t.row_slice_mut(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(n >= MIN_NORM) {
                    let fresh = Tensor::randn(1, row.len(), 1.0, rng);
                    row.copy_from_slice(fresh.data());
                    fixed += 1;
                }
            }
        }
        fixed
    }

    pub fn export(&self, registry: &ParameterRegistry) -> CodebookExport {
        CodebookExport {
            k: self.k,
            s: self.s,
            d_llm: self.d,
            private: registry.value(self.private).data().to_vec(),
            shared: registry.value(self.shared).data().to_vec(),
        }
    }
}

/// JSON layout of an exported codebook; vectors are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookExport {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub d_llm: usize,
    pub private: Vec<f64>,
    pub shared: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSelection {
    pub scores: Vec<f64>,
    pub raw_cos: Vec<f64>,
    pub selected: Vec<usize>,
    pub m: usize,
}

/// Cosine of `e_u` against every codeword and their softmax.
pub fn score_prompts(e_u: &[f64], codebook: &Tensor) -> Result<PromptSelection> {
    if codebook.cols() != e_u.len() {
        return Err(CocoError::Model(format!(
            "user vector has {} dims, codebook {}",
            e_u.len(),
            codebook.cols()
        )));
    }
    let raw_cos = (0..codebook.rows())
        .map(|i| cosine(e_u, codebook.row_slice(i)))
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    let max = raw_cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw_cos.iter().map(|c| (c - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(PromptSelection {
        scores: exps.iter().map(|e| e / z).collect(),
        raw_cos,
        selected: Vec::new(),
        m: 0,
    })
}

/// Keeps codewords whose raw cosine exceeds `theta`, in ascending index order.
pub fn select_prompts(mut sel: PromptSelection, theta: f64) -> Result<PromptSelection> {
    if !(theta > -1.0 && theta < 1.0) {
        return Err(CocoError::Model(format!("theta {theta} outside (-1, 1)")));
    }
    sel.selected = (0..sel.raw_cos.len()).filter(|&i| sel.raw_cos[i] > theta).collect();
    sel.m = sel.selected.len();
    Ok(sel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssembledPrompt {
    pub h_prompt: Var,
    pub h_l: Var,
    pub valid_len: usize,
}

/// `h_prompt = [shared ; selected]` and `h_l = [h_prompt ; h_text]`, zero-padded
/// to `pad_to` rows when given.
pub fn assemble_prompt(
    g: &mut Graph<'_>,
    sel: &PromptSelection,
    cb: &PromptCodebook,
    h_text: Var,
    l_max: usize,
    pad_to: Option<usize>,
) -> Result<AssembledPrompt> {
    let shared = g.param(cb.shared);
    let h_prompt = if sel.selected.is_empty() {
        shared
    } else {
        let z = g.param(cb.private);
        let picked = g.gather_rows(z, &sel.selected)?;
        g.concat_rows(&[shared, picked])?
    };
    let valid_len = cb.s + sel.selected.len() + g.value(h_text).rows();
    if valid_len > l_max {
        return Err(CocoError::Model(format!(
            "prompt of {valid_len} rows exceeds context {l_max}"
        )));
    }
    let mut parts = vec![h_prompt, h_text];
    if let Some(len) = pad_to {
        if len > l_max || len < valid_len {
            return Err(CocoError::Model(format!("cannot pad {valid_len} rows to {len}")));
        }
        if len > valid_len {
            parts.push(g.constant(Tensor::zeros(len - valid_len, cb.d)));
        }
    }
    let h_l = g.concat_rows(&parts)?;
    Ok(AssembledPrompt {
        h_prompt,
        h_l,
        valid_len,
    })
}

/// `L_Q = mean over rows of Σ_{k ∈ selected} ‖e_u − z_k‖²`; `e_u` is `B × d`.
pub fn quantization_loss(g: &mut Graph<'_>, e_u: Var, sels: &[PromptSelection], cb: &PromptCodebook) -> Result<Var> {
    let b = g.value(e_u).rows();
    if sels.len() != b || b == 0 {
        return Err(CocoError::Model("one selection per user row is required".into()));
    }
    let mut rows = Vec::new();
    let mut codes = Vec::new();
    for (r, s) in sels.iter().enumerate() {
        for &k in &s.selected {
            rows.push(r);
            codes.push(k);
        }
    }
    if codes.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let e = g.gather_rows(e_u, &rows)?;
    let z = g.param(cb.private);
    let z = g.gather_rows(z, &codes)?;
    let d = g.sub(e, z)?;
    let sq = g.mul(d, d)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, 1.0 / b as f64)?)
}

/// `e_u = MLP([user embedding ; mean of prefix item embeddings])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserEncoder {
    pub user_emb: ParamId,
    pub l1: Linear,
    pub l2: Linear,
}

impl UserEncoder {
    pub fn new<R: Rng>(
        registry: &mut ParameterRegistry,
        n_users: usize,
        d_user: usize,
        d_rs: usize,
        d_llm: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut pb = ParamBuilder::new(registry, rng, "user_enc", false);
        let user_emb = pb.randn("user_emb", n_users.max(1), d_user, (1.0 / d_user as f64).sqrt())?;
        let l1 = pb.linear("l1", d_user + d_rs, d_llm, true)?;
        let l2 = pb.linear("l2", d_llm, d_llm, true)?;
        Ok(Self { user_emb, l1, l2 })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.user_emb];
        ids.extend(self.l1.ids());
        ids.extend(self.l2.ids());
        ids
    }

    /// One `e_u` row per `(user, prefix)`; `item_table` is the backbone's
    /// item embedding matrix.
    pub fn encode(&self, g: &mut Graph<'_>, item_table: Var, users: &[usize], prefixes: &[&[usize]]) -> Result<Var> {
        if users.len() != prefixes.len() || users.is_empty() {
            return Err(CocoError::Model("users and prefixes must pair up".into()));
        }
        let total: usize = prefixes.iter().map(|p| p.len()).sum();
        let mut avg = Tensor::zeros(users.len(), total);
        let mut flat = Vec::with_capacity(total);
        for (r, p) in prefixes.iter().enumerate() {
            if p.is_empty() {
                return Err(CocoError::Model(format!("row {r} has an empty prefix")));
            }
            for &it in p.iter() {
                avg.data_mut()[r * total + flat.len()] = 1.0 / p.len() as f64;
                flat.push(it);
            }
        }
        let items = g.gather_rows(item_table, &flat)?;
        let avg = g.constant(avg);
        let mean = g.matmul(avg, items)?;
        let ue = g.param(self.user_emb);
        let ue = g.gather_rows(ue, users)?;
        let x = g.concat_cols(&[ue, mean])?;
        let h = self.l1.forward(g, x)?;
        let h = g.gelu(h)?;
        Ok(self.l2.forward(g, h)?)
    }
}

/// Single-row form of [`UserEncoder::encode`].
pub fn encode_user(g: &mut Graph<'_>, enc: &UserEncoder, item_table: Var, user: usize, prefix: &[usize]) -> Result<Var> {
    enc.encode(g, item_table, &[user], &[prefix])
}

/// Seed prompt lines from `path`, else from the file named by
/// [`SEED_PROMPTS_ENV`], else the bundled list.
pub fn load_seed_prompts(path: Option<&Path>) -> Result<Vec<String>> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => match std::env::var_os(SEED_PROMPTS_ENV) {
            Some(p) => std::fs::read_to_string(p)?,
            None => BUNDLED_SEED_PROMPTS.to_string(),
        },
    };
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if lines.is_empty() {
        return Err(CocoError::Config("seed prompt file has no lines".into()));
    }
    Ok(lines)
}

/// Codebook rows from encoded seed texts (cycled with Gaussian jitter once
/// the seeds run out) and shared rows from the universal texts.
pub fn init_codebook<R: Rng>(
    registry: &ParameterRegistry,
    lm: &ToyLm,
    tokenizer: &Tokenizer,
    k: usize,
    s: usize,
    seeds: &[String],
    shared_texts: &[&str],
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if k == 0 || s == 0 || seeds.is_empty() || shared_texts.is_empty() {
        return Err(CocoError::Config("codebook needs K, S >= 1 and seed and shared texts".into()));
    }
    let used: Vec<&str> = seeds.iter().take(k).map(String::as_str).collect();
    let mut enc = lm.encode_text_for_init(registry, tokenizer, &used)?;
    // pooled states of an untrained LM share one dominant direction; centering keeps selection cosines informative
    if enc.rows() > 1 {
        let (r, c) = enc.dims();
        let mean: Vec<f64> = (0..c).map(|j| (0..r).map(|i| enc.get(i, j)).sum::<f64>() / r as f64).collect();
        for i in 0..r {
            for (v, m) in enc.row_slice_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }
    let shared_enc = lm.encode_text_for_init(registry, tokenizer, shared_texts)?;
    let jittered = |base: &Tensor, n: usize, rng: &mut R| {
        let d = base.cols();
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let src = base.row_slice(r % base.rows());
            let noise = if r < base.rows() {
                Tensor::zeros(1, d)
            } else {
                Tensor::randn(1, d, JITTER_STD, rng)
            };
            for (c, o) in out.row_slice_mut(r).iter_mut().enumerate() {
                *o = src[c] + noise.data()[c];
            }
        }
        out
    };
    let private = jittered(&enc, k, rng);
    let shared = jittered(&shared_enc, s, rng);
    Ok((private, shared))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sel_from(raw: Vec<f64>) -> PromptSelection {
        PromptSelection {
            scores: vec![1.0 / raw.len() as f64; raw.len()],
            raw_cos: raw,
            selected: Vec::new(),
            m: 0,
        }
    }

    #[test]
    fn softmax_of_two_opposite_cosines() {
        let cb = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let s = score_prompts(&[2.0, 0.0], &cb).unwrap();
        let e = 1f64.exp();
        assert!((s.scores[0] - e / (e + 1.0 / e)).abs() < 1e-12);
        assert!((s.scores[0] - 0.880797).abs() < 1e-6 && (s.scores[1] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn equal_cosines_are_uniform_and_zero_norm_fails() {
        let cb = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![2.0, 0.0]]).unwrap();
        let s = score_prompts(&[1.0, 0.0], &cb).unwrap();
        assert!((s.scores[0] - s.scores[1]).abs() < 1e-15);
        assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(score_prompts(&[0.0, 0.0], &cb).is_err());
    }

    #[test]
    fn selection_gates_on_raw_cosine() {
        let mut rows = vec![vec![0.0; 8]; 8];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 1.0;
        }
        let cb = Tensor::from_rows(&rows).unwrap();
        let s = select_prompts(score_prompts(cb.row_slice(5), &cb).unwrap(), 0.45).unwrap();
        assert_eq!(s.selected, vec![5]);
        let none = select_prompts(sel_from(vec![0.2, 0.3]), 0.3).unwrap();
        assert_eq!(none.m, 0);
        let sorted = select_prompts(sel_from(vec![0.9, -0.1, 0.5, 0.7]), 0.45).unwrap();
        assert_eq!(sorted.selected, vec![0, 2, 3]);
        assert!(select_prompts(sel_from(vec![0.1]), 1.0).is_err());
    }

    fn codebook(rows: &[Vec<f64>], shared: &[Vec<f64>]) -> (ParameterRegistry, PromptCodebook) {
        let mut reg = ParameterRegistry::new();
        let cb = PromptCodebook::register(
            &mut reg,
            Tensor::from_rows(rows).unwrap(),
            Tensor::from_rows(shared).unwrap(),
        )
        .unwrap();
        (reg, cb)
    }

    fn lq(reg: &ParameterRegistry, cb: &PromptCodebook, e: Vec<f64>, selected: Vec<usize>) -> f64 {
        let mut g = Graph::new(reg);
        let e = g.constant(Tensor::row(e));
        let sel = PromptSelection {
            m: selected.len(),
            selected,
            scores: vec![],
            raw_cos: vec![],
        };
        let l = quantization_loss(&mut g, e, &[sel], cb).unwrap();
        g.scalar(l).unwrap()
    }

    #[test]
    fn quantization_loss_examples() {
        let (reg, cb) = codebook(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 1.0]]);
        assert_eq!(lq(&reg, &cb, vec![1.0, 0.0], vec![0]), 0.0);
        assert_eq!(lq(&reg, &cb, vec![1.0, 0.0], vec![1]), 2.0);
        let brute: f64 = [[1.0, 0.0], [0.0, 1.0]]
            .iter()
            .map(|z: &[f64; 2]| z.iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert_eq!(lq(&reg, &cb, vec![0.0, 0.0], vec![0, 1]), brute);
        assert_eq!(lq(&reg, &cb, vec![3.0, 0.0], vec![]), 0.0);
    }

    #[test]
    fn assembly_orders_shared_then_selected() {
        let (reg, cb) = codebook(
            &[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0], vec![4.0, 0.0]],
            &[vec![0.0, 7.0], vec![0.0, 8.0]],
        );
        let mut g = Graph::new(&reg);
        let text = g.constant(Tensor::filled(7, 2, 0.5));
        let sel = PromptSelection {
            selected: vec![0, 2, 3],
            m: 3,
            scores: vec![],
            raw_cos: vec![],
        };
        let a = assemble_prompt(&mut g, &sel, &cb, text, 16, Some(16)).unwrap();
        assert_eq!(a.valid_len, 12);
        assert_eq!(g.value(a.h_prompt).rows(), 5);
        let hl = g.value(a.h_l);
        assert_eq!(hl.rows(), 16);
        assert_eq!(hl.row_slice(1), &[0.0, 8.0]);
        assert_eq!(hl.row_slice(3), &[3.0, 0.0]);
        assert!((12..16).all(|r| hl.row_slice(r) == [0.0, 0.0]));
        let empty = PromptSelection {
            selected: vec![],
            m: 0,
            ..sel.clone()
        };
        let a = assemble_prompt(&mut g, &empty, &cb, text, 16, None).unwrap();
        assert_eq!(g.value(a.h_prompt).rows(), 2);
        assert!(assemble_prompt(&mut g, &sel, &cb, text, 11, None).is_err());
    }

    #[test]
    fn user_encoder_ignores_padding_and_is_deterministic() {
        let mut reg = ParameterRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = reg.register("items", Tensor::randn(10, 4, 1.0, &mut rng), false).unwrap();
        let enc = UserEncoder::new(&mut reg, 3, 4, 4, 8, &mut rng).unwrap();
        let mut batch = crate::corpus::Batch::from_rows(
            &[
                crate::corpus::TrainingRow {
                    user: 1,
                    prefix: vec![2, 3],
                    target: 4,
                },
                crate::corpus::TrainingRow {
                    user: 1,
                    prefix: vec![2, 3],
                    target: 5,
                },
            ],
            5,
        )
        .unwrap();
        let run = |batch: &crate::corpus::Batch| {
            let mut g = Graph::new(&reg);
            let t = g.param(table);
            let p: Vec<&[usize]> = (0..2).map(|r| batch.prefix(r)).collect();
            let e = enc.encode(&mut g, t, &batch.users, &p).unwrap();
            g.value(e).clone()
        };
        let a = run(&batch);
        assert_eq!(a.shape(), &[2, 8]);
        assert_eq!(a.row_slice(0), a.row_slice(1));
        batch.items[3] = 9;
        assert_eq!(run(&batch), a);
        let mut g = Graph::new(&reg);
        let t = g.param(table);
        assert!(encode_user(&mut g, &enc, t, 0, &[]).is_err());
    }

    #[test]
    fn bundled_seeds_load_and_repair_fixes_zero_rows() {
        let seeds = load_seed_prompts(None).unwrap();
        assert!(seeds.len() >= 16);
        let (mut reg, cb) = codebook(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[vec![1.0, 1.0]]);
        assert_eq!(cb.repair(&mut reg, &mut ChaCha8Rng::seed_from_u64(0)), 1);
        assert!(reg.value(cb.private).row_slice(0).iter().any(|v| *v != 0.0));
        let json = serde_json::to_value(cb.export(&reg)).unwrap();
        assert_eq!(json["K"], 2);
        assert_eq!(json["d_llm"], 2);
    }
}
