//! Causal transformer sequence encoder and the contrastive next-item loss.

use rand::Rng;

use crate::corpus::Batch;
use crate::diffcore::{Graph, ParamId, ParameterRegistry, Tensor, Var};
use crate::error::{CocoError, Result};
use crate::layers::{segmented_self_attention, LayerNormParams, Linear, ParamBuilder, Segment};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub n_items: usize,
    pub d_rs: usize,
    pub t_max: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
}

impl BackboneConfig {
    pub fn new(n_items: usize, d_rs: usize, t_max: usize) -> Self {
        Self {
            n_items,
            d_rs,
            t_max,
            n_blocks: 2,
            n_heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.t_max == 0 || self.n_blocks == 0 {
            return Err(CocoError::Config("backbone needs items, t_max >= 1 and blocks >= 1".into()));
        }
        if self.n_heads == 0 || self.d_rs % self.n_heads != 0 {
            return Err(CocoError::Config(format!(
                "d_rs {} is not divisible by {} heads",
                self.d_rs, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormParams,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
}

/// Parameter handles of the backbone; values live in the registry.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub item_emb: ParamId,
    pub pos_emb: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNormParams,
}

impl Backbone {
    pub fn new<R: Rng>(registry: &mut ParameterRegistry, cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_rs;
        let std = (1.0 / d as f64).sqrt();
        let mut pb = ParamBuilder::new(registry, rng, "backbone", false);
        let item_emb = pb.randn("item_emb", cfg.n_items, d, std)?;
        let pos_emb = pb.randn("pos_emb", cfg.t_max, d, std)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for l in 0..cfg.n_blocks {
            blocks.push(Block {
                ln1: pb.layer_norm(&format!("block{l}.ln1"), d)?,
                wq: pb.linear(&format!("block{l}.wq"), d, d, false)?,
                wk: pb.linear(&format!("block{l}.wk"), d, d, false)?,
                wv: pb.linear(&format!("block{l}.wv"), d, d, false)?,
                wo: pb.linear(&format!("block{l}.wo"), d, d, true)?,
                ln2: pb.layer_norm(&format!("block{l}.ln2"), d)?,
                ff1: pb.linear(&format!("block{l}.ff1"), d, d, true)?,
                ff2: pb.linear(&format!("block{l}.ff2"), d, d, true)?,
            });
        }
        let final_ln = pb.layer_norm("final_ln", d)?;
        // unit-scale h_RS keeps initial logits u·v/τ of order one
        let g0 = 1.0 / (d as f64).sqrt();
        registry.value_mut(final_ln.gain).data_mut().iter_mut().for_each(|v| *v = g0);
        Ok(Self {
            cfg,
            item_emb,
            pos_emb,
            blocks,
            final_ln,
        })
    }

    pub fn item_table(&self, g: &mut Graph<'_>) -> Var {
        g.param(self.item_emb)
    }

    /// Row `i` is the embedding of `indices[i]`.
    pub fn item_embed(&self, g: &mut Graph<'_>, indices: &[usize]) -> Result<Var> {
        let table = g.param(self.item_emb);
        Ok(g.gather_rows(table, indices)?)
    }

    /// `h_RS` of every batch row, read at its last valid position.
    pub fn encode_sequence(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Var> {
        for (r, &len) in batch.lengths.iter().enumerate() {
            if len == 0 {
                return Err(CocoError::Model(format!("batch row {r} is all padding")));
            }
        }
        let prefixes: Vec<&[usize]> = (0..batch.len()).map(|r| batch.prefix(r)).collect();
        self.encode_prefixes(g, &prefixes)
    }

    /// Encodes each prefix (oldest first); prefixes longer than `t_max`
    /// keep their most recent items.
    pub fn encode_prefixes(&self, g: &mut Graph<'_>, prefixes: &[&[usize]]) -> Result<Var> {
        if prefixes.is_empty() {
            return Err(CocoError::Model("no sequences to encode".into()));
        }
        let mut items = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(prefixes.len());
        let mut last = Vec::with_capacity(prefixes.len());
        for (r, p) in prefixes.iter().enumerate() {
            if p.is_empty() {
                return Err(CocoError::Model(format!("sequence {r} is empty")));
            }
            let kept = &p[p.len().saturating_sub(self.cfg.t_max)..];
            segments.push(Segment::full(items.len(), kept.len()));
            items.extend_from_slice(kept);
            positions.extend(0..kept.len());
            last.push(items.len() - 1);
        }
        let table = g.param(self.item_emb);
        let pos = g.param(self.pos_emb);
        let e = g.gather_rows(table, &items)?;
        let pe = g.gather_rows(pos, &positions)?;
        let mut x = g.add(e, pe)?;
        let heads = self.cfg.n_heads;
        for b in &self.blocks {
            let h = b.ln1.forward(g, x)?;
            let q = b.wq.forward(g, h)?;
            let k = b.wk.forward(g, h)?;
            let v = b.wv.forward(g, h)?;
            let a = segmented_self_attention(g, q, k, v, &segments, heads)?;
            let a = b.wo.forward(g, a)?;
            x = g.add(x, a)?;
            let h = b.ln2.forward(g, x)?;
            let f = b.ff1.forward(g, h)?;
            let f = g.gelu(f)?;
            let f = b.ff2.forward(g, f)?;
            x = g.add(x, f)?;
        }
        let out = g.gather_rows(x, &last)?;
        Ok(self.final_ln.forward(g, out)?)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(CocoError::Model(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `-log softmax` of the positive logit among `[u·v⁺, u·v⁻_1, ...] / tau`.
/// `u` and `v_pos` are `1 × d`, `v_negs` is `N × d`.
pub fn info_nce(g: &mut Graph<'_>, u: Var, v_pos: Var, v_negs: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if g.value(v_negs).rows() == 0 {
        return Err(CocoError::Model("info_nce needs at least one negative".into()));
    }
    let cands = g.concat_rows(&[v_pos, v_negs])?;
    let logits = g.matmul_nt(u, cands)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let ls = g.log_softmax_rows(logits)?;
    let pos = g.slice_cols(ls, 0, 1)?;
    let loss = g.scale(pos, -1.0)?;
    Ok(g.sum(loss)?)
}

/// Mean over batch rows of [`info_nce`], where row `r` contrasts
/// `targets[r]` against the item set `negatives[r]`. A row whose batch
/// shares its target everywhere has no negatives and contributes zero.
pub fn batched_info_nce(
    g: &mut Graph<'_>,
    u: Var,
    table: Var,
    targets: &[usize],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let b = targets.len();
    if b == 0 || negatives.len() != b || g.value(u).rows() != b {
        return Err(CocoError::Model("batched_info_nce: row counts disagree".into()));
    }
    let mut cols: Vec<usize> = Vec::new();
    let col_of = |cols: &mut Vec<usize>, it: usize| match cols.iter().position(|&c| c == it) {
        Some(p) => p,
        None => {
            cols.push(it);
            cols.len() - 1
        }
    };
    let mut pos_cols = Vec::with_capacity(b);
    let mut neg_cols = Vec::with_capacity(b);
    for r in 0..b {
        pos_cols.push(col_of(&mut cols, targets[r]));
        let mut nc = Vec::with_capacity(negatives[r].len());
        for &n in &negatives[r] {
            let c = col_of(&mut cols, n);
            if c == pos_cols[r] || nc.contains(&c) {
                return Err(CocoError::Model(format!(
                    "row {r}: negatives must be distinct and differ from the target"
                )));
            }
            nc.push(c);
        }
        neg_cols.push(nc);
    }
    let t = cols.len();
    let mut mask = vec![false; b * t];
    let mut onehot = Tensor::zeros(b, t);
    for r in 0..b {
        mask[r * t + pos_cols[r]] = true;
        onehot.data_mut()[r * t + pos_cols[r]] = -1.0 / b as f64;
        for &c in &neg_cols[r] {
            mask[r * t + c] = true;
        }
    }
    let cands = g.gather_rows(table, &cols)?;
    let logits = g.matmul_nt(u, cands)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    // excluded candidates get a huge negative offset, so their softmax mass
    // underflows to exactly zero while the log stays finite
    let offset = Tensor::matrix(b, t, mask.iter().map(|&m| if m { 0.0 } else { -1e9 }).collect())?;
    let offset = g.constant(offset);
    let logits = g.add(logits, offset)?;
    let lp = g.log_softmax_rows(logits)?;
    let sel = g.constant(onehot);
    let picked = g.mul(lp, sel)?;
    Ok(g.sum(picked)?)
}

/// Plain evaluation of [`info_nce`] with the softmax computed by max-shift.
pub fn info_nce_value(u: &[f64], v_pos: &[f64], v_negs: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if v_negs.is_empty() {
        return Err(CocoError::Model("info_nce needs at least one negative".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let pos = dot(u, v_pos);
    let logits: Vec<f64> = std::iter::once(pos).chain(v_negs.iter().map(|v| dot(u, v))).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TrainingRow;
    use crate::diffcore::ParameterRegistry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval_loss(u: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
        let reg = ParameterRegistry::new();
        let mut g = Graph::new(&reg);
        let u = g.constant(Tensor::row(u.to_vec()));
        let p = g.constant(Tensor::row(pos.to_vec()));
        let n = g.constant(Tensor::from_rows(negs).unwrap());
        let l = info_nce(&mut g, u, p, n, tau).unwrap();
        g.scalar(l).unwrap()
    }

    #[test]
    fn equal_logits_give_log_n_plus_one() {
        let negs = vec![vec![1.0, 0.0]; 3];
        let l = eval_loss(&[1.0, 0.0], &[1.0, 0.0], &negs, 0.5);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn unit_positive_logit_matches_closed_form() {
        let negs = vec![vec![0.0, 1.0]; 3];
        let l = eval_loss(&[1.0, 0.0], &[1.0, 0.0], &negs, 1.0);
        let e = 1f64.exp();
        assert!((l + (e / (e + 3.0)).ln()).abs() < 1e-12);
        assert!((l - 0.743668).abs() < 1e-6);
    }

    #[test]
    fn large_temperature_flattens_to_uniform() {
        let negs = vec![vec![0.3, -2.0], vec![1.5, 0.5]];
        let l = eval_loss(&[1.0, 2.0], &[0.2, 0.1], &negs, 1e9);
        assert!((l - 3f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn bad_temperature_and_empty_negatives_are_errors() {
        assert!(info_nce_value(&[1.0], &[1.0], &[vec![0.0]], 0.0).is_err());
        assert!(info_nce_value(&[1.0], &[1.0], &[], 1.0).is_err());
        let reg = ParameterRegistry::new();
        let mut g = Graph::new(&reg);
        let u = g.constant(Tensor::row(vec![1.0]));
        let n = g.constant(Tensor::zeros(0, 1));
        assert!(info_nce(&mut g, u, u, n, 1.0).is_err());
    }

    #[test]
    fn rows_without_negatives_contribute_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reg = ParameterRegistry::new();
        let mut g = Graph::new(&reg);
        let u = g.constant(Tensor::randn(2, 3, 1.0, &mut rng));
        let table = g.constant(Tensor::randn(4, 3, 1.0, &mut rng));
        let l = batched_info_nce(&mut g, u, table, &[2, 2], &[vec![], vec![]], 0.5).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn batched_loss_is_the_mean_of_per_row_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = Tensor::randn(6, 4, 1.0, &mut rng);
        let u = Tensor::randn(3, 4, 1.0, &mut rng);
        let targets = [1, 4, 1];
        let negatives = vec![vec![4, 2], vec![1, 0, 5], vec![3]];
        let reg = ParameterRegistry::new();
        let mut g = Graph::new(&reg);
        let uv = g.constant(u.clone());
        let tv = g.constant(table.clone());
        let l = batched_info_nce(&mut g, uv, tv, &targets, &negatives, 0.3).unwrap();
        let got = g.scalar(l).unwrap();
        let rows = table.to_rows();
        let mut want = 0.0;
        for r in 0..3 {
            let negs: Vec<Vec<f64>> = negatives[r].iter().map(|&n| rows[n].clone()).collect();
            want += info_nce_value(u.row_slice(r), &rows[targets[r]], &negs, 0.3).unwrap() / 3.0;
        }
        assert!((got - want).abs() < 1e-12);
    }

    fn backbone(seed: u64) -> (ParameterRegistry, Backbone) {
        let mut reg = ParameterRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BackboneConfig::new(12, 8, 5);
        let bb = Backbone::new(&mut reg, cfg, &mut rng).unwrap();
        (reg, bb)
    }

    fn encode(reg: &ParameterRegistry, bb: &Backbone, batch: &Batch) -> Tensor {
        let mut g = Graph::new(reg);
        let h = bb.encode_sequence(&mut g, batch).unwrap();
        g.value(h).clone()
    }

    fn rows(spec: &[&[usize]]) -> Vec<TrainingRow> {
        spec.iter()
            .enumerate()
            .map(|(u, p)| TrainingRow {
                user: u,
                prefix: p.to_vec(),
                target: 11 - u,
            })
            .collect()
    }

    #[test]
    fn padding_content_does_not_change_h_rs() {
        let (reg, bb) = backbone(1);
        let mut batch = Batch::from_rows(&rows(&[&[1, 2], &[3, 4, 5]]), 5).unwrap();
        let a = encode(&reg, &bb, &batch);
        batch.items[3] = 9;
        batch.items[4] = 7;
        let b = encode(&reg, &bb, &batch);
        assert_eq!(a, b);
    }

    #[test]
    fn identical_prefixes_give_identical_rows() {
        let (reg, bb) = backbone(2);
        let batch = Batch::from_rows(&rows(&[&[4, 2, 6], &[4, 2, 6]]), 5).unwrap();
        let h = encode(&reg, &bb, &batch);
        assert_eq!(h.row_slice(0), h.row_slice(1));
        assert_eq!(h.shape(), &[2, 8]);
    }

    #[test]
    fn prefix_rows_do_not_interact() {
        let (reg, bb) = backbone(3);
        let a = encode(&reg, &bb, &Batch::from_rows(&rows(&[&[1], &[3, 4, 5]]), 5).unwrap());
        let b = encode(&reg, &bb, &Batch::from_rows(&rows(&[&[1], &[7, 8]]), 5).unwrap());
        assert_eq!(a.row_slice(0), b.row_slice(0));
    }

    #[test]
    fn all_padding_row_is_rejected() {
        let (reg, bb) = backbone(4);
        let mut batch = Batch::from_rows(&rows(&[&[1], &[2]]), 5).unwrap();
        batch.lengths[1] = 0;
        let mut g = Graph::new(&reg);
        assert!(bb.encode_sequence(&mut g, &batch).is_err());
    }

    #[test]
    fn item_embed_rows_and_range() {
        let (reg, bb) = backbone(5);
        let mut g = Graph::new(&reg);
        let e = bb.item_embed(&mut g, &[3, 3, 0]).unwrap();
        let v = g.value(e);
        assert_eq!(v.shape(), &[3, 8]);
        assert_eq!(v.row_slice(0), v.row_slice(1));
        assert!(bb.item_embed(&mut g, &[12]).is_err());
    }
}
