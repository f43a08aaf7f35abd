//! Decoupling of mixed language-model states into per-prompt knowledge and
//! its alignment with the behavioral representation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParameterRegistry, Tensor, Var};
use crate::error::{CocoError, Result};
use crate::layers::{attend, attention_mask, Linear, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub d_llm: usize,
    pub d_rs: usize,
    pub d_a: usize,
    pub decouple_heads: usize,
    pub align_heads: usize,
}

impl FusionConfig {
    pub fn new(d_llm: usize, d_rs: usize) -> Self {
        Self {
            d_llm,
            d_rs,
            d_a: d_rs,
            decouple_heads: 1,
            align_heads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionParams {
    pub cfg: FusionConfig,
    pub w1q: Linear,
    pub w1k: Linear,
    pub w1v: Linear,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub w2q: Linear,
    pub w2k: Linear,
    pub w2v: Linear,
    pub out: Linear,
}

impl FusionParams {
    pub fn new<R: Rng>(registry: &mut ParameterRegistry, cfg: FusionConfig, rng: &mut R) -> Result<Self> {
        for (d, h) in [(cfg.d_a, cfg.decouple_heads), (cfg.d_a, cfg.align_heads)] {
            if h == 0 || d % h != 0 {
                return Err(CocoError::Config(format!("d_a {d} is not divisible by {h} heads")));
            }
        }
        let FusionConfig { d_llm, d_rs, d_a, .. } = cfg;
        let mut pb = ParamBuilder::new(registry, rng, "fusion", false);
        Ok(Self {
            cfg,
            w1q: pb.linear("w1q", d_llm, d_a, false)?,
            w1k: pb.linear("w1k", d_llm, d_a, false)?,
            w1v: pb.linear("w1v", d_llm, d_a, false)?,
            mlp1: pb.linear("mlp1", d_rs + d_a, d_a, true)?,
            mlp2: pb.linear("mlp2", d_a, d_a, true)?,
            w2q: pb.linear("w2q", d_rs, d_a, false)?,
            w2k: pb.linear("w2k", d_a, d_a, false)?,
            w2v: pb.linear("w2v", d_a, d_a, false)?,
            out: pb.linear("out", d_a, d_rs, true)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.w1q, self.w1k, self.w1v, self.mlp1, self.mlp2, self.w2q, self.w2k, self.w2v, self.out,
        ]
        .iter()
        .flat_map(Linear::ids)
        .collect()
    }
}

/// `h_pure = softmax(Q Kᵀ / √d) V` with prompt-row queries against the valid
/// rows of `h_mix`.
pub fn decouple(g: &mut Graph<'_>, p: &FusionParams, h_prompt: Var, h_mix: Var, valid_len: usize) -> Result<Var> {
    let n_k = g.value(h_mix).rows();
    if valid_len == 0 || valid_len > n_k {
        return Err(CocoError::Model(format!("decouple needs 1..={n_k} valid rows, got {valid_len}")));
    }
    let n_q = g.value(h_prompt).rows();
    let q = p.w1q.forward(g, h_prompt)?;
    let k = p.w1k.forward(g, h_mix)?;
    let v = p.w1v.forward(g, h_mix)?;
    let mask = (valid_len < n_k).then(|| attention_mask(n_q, n_k, valid_len, false));
    Ok(attend(g, q, k, v, p.cfg.decouple_heads, mask.as_deref())?)
}

/// One knowledge row from the mean of the valid `h_mix` rows, projected by
/// the value matrix; used when decoupling is ablated.
pub fn pooled_knowledge(g: &mut Graph<'_>, p: &FusionParams, h_mix: Var, valid_len: usize) -> Result<Var> {
    let n = g.value(h_mix).rows();
    if valid_len == 0 || valid_len > n {
        return Err(CocoError::Model(format!("need 1..={n} valid rows, got {valid_len}")));
    }
    let rows = g.slice_rows(h_mix, 0, valid_len)?;
    let mean = g.mean_rows(rows)?;
    Ok(p.w1v.forward(g, mean)?)
}

/// `Σ_{i<j} |cos(z_i, z_j)|` over the codebook rows.
pub fn orthogonality_loss(g: &mut Graph<'_>, codebook: Var) -> Result<Var> {
    let n = g.normalize_rows(codebook)?;
    let c = g.matmul_nt(n, n)?;
    let k = g.value(c).rows();
    let mut sign = Tensor::zeros(k, k);
    for i in 0..k {
        for j in i + 1..k {
            let v = g.value(c).get(i, j);
            sign.data_mut()[i * k + j] = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    let sign = g.constant(sign);
    let upper = g.mul(c, sign)?;
    Ok(g.sum(upper)?)
}

/// Mean of `|cos(z_i, z_j)|` over unordered pairs.
pub fn mean_abs_cosine(codebook: &Tensor) -> Result<f64> {
    let k = codebook.rows();
    if k < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += crate::diffcore::cosine(codebook.row_slice(i), codebook.row_slice(j))?.abs();
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

// rows [h_RS ; pooled] and [h_RS ; h_pure_j]
fn concat_rows_with(g: &mut Graph<'_>, h_rs: Var, h_pure: Var) -> Result<Var> {
    let p = g.value(h_pure).rows();
    if p == 0 {
        return Err(CocoError::Model("no knowledge rows to align".into()));
    }
    let pooled = g.mean_rows(h_pure)?;
    let knowledge = g.concat_rows(&[pooled, h_pure])?;
    let rs = g.gather_rows(h_rs, &vec![0; p + 1])?;
    Ok(g.concat_cols(&[rs, knowledge])?)
}

/// Cross attention from `h_RS` over the per-row MLP of `[h_RS ; knowledge]`,
/// projected back to `d_rs`.
pub fn align(g: &mut Graph<'_>, p: &FusionParams, h_rs: Var, h_pure: Var) -> Result<Var> {
    if g.value(h_rs).rows() != 1 {
        return Err(CocoError::Model("align expects a single h_RS row".into()));
    }
    let rows = concat_rows_with(g, h_rs, h_pure)?;
    let h = p.mlp1.forward(g, rows)?;
    let h = g.gelu(h)?;
    let h_concat = p.mlp2.forward(g, h)?;
    let q = p.w2q.forward(g, h_rs)?;
    let k = p.w2k.forward(g, h_concat)?;
    let v = p.w2v.forward(g, h_concat)?;
    let a = attend(g, q, k, v, p.cfg.align_heads, None)?;
    Ok(p.out.forward(g, a)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    Concat,
    Mlp,
}

impl FromStr for FusionStrategy {
    type Err = CocoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "mlp" => Ok(Self::Mlp),
            other => Err(CocoError::Config(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Mlp => "mlp",
        })
    }
}

/// Weights of the two simpler fusion heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AltFusionParams {
    pub strategy: FusionStrategy,
    pub l1: Linear,
    pub l2: Option<Linear>,
}

impl AltFusionParams {
    pub fn new<R: Rng>(
        registry: &mut ParameterRegistry,
        strategy: FusionStrategy,
        cfg: FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut pb = ParamBuilder::new(registry, rng, "fusion.alt", false);
        let d_in = cfg.d_rs + cfg.d_a;
        Ok(match strategy {
            FusionStrategy::Concat => Self {
                strategy,
                l1: pb.linear("concat", d_in, cfg.d_rs, true)?,
                l2: None,
            },
            FusionStrategy::Mlp => Self {
                strategy,
                l1: pb.linear("mlp1", d_in, cfg.d_a, true)?,
                l2: Some(pb.linear("mlp2", cfg.d_a, cfg.d_rs, true)?),
            },
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.l1.ids().into_iter().chain(self.l2.iter().flat_map(Linear::ids)).collect()
    }
}

/// `[h_RS ; mean(h_pure)]` through a linear layer or a two-layer MLP.
pub fn alternative_fusion(g: &mut Graph<'_>, p: &AltFusionParams, h_rs: Var, h_pure: Var) -> Result<Var> {
    if g.value(h_pure).rows() == 0 {
        return Err(CocoError::Model("no knowledge rows to fuse".into()));
    }
    let pooled = g.mean_rows(h_pure)?;
    let x = g.concat_cols(&[h_rs, pooled])?;
    let y = p.l1.forward(g, x)?;
    match p.l2 {
        None => Ok(y),
        Some(l2) => {
            let h = g.gelu(y)?;
            Ok(l2.forward(g, h)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d_llm: usize, d_rs: usize) -> (ParameterRegistry, FusionParams) {
        let mut reg = ParameterRegistry::new();
        let p = FusionParams::new(&mut reg, FusionConfig::new(d_llm, d_rs), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (reg, p)
    }

    fn ortho(rows: &[Vec<f64>]) -> f64 {
        let reg = ParameterRegistry::new();
        let mut g = Graph::new(&reg);
        let z = g.constant(Tensor::from_rows(rows).unwrap());
        let l = orthogonality_loss(&mut g, z).unwrap();
        g.scalar(l).unwrap()
    }

    #[test]
    fn orthogonality_examples() {
        assert_eq!(ortho(&[vec![1.0, 0.0], vec![0.0, 2.0]]), 0.0);
        assert!((ortho(&vec![vec![1.0, 0.0]; 3]) - 3.0).abs() < 1e-12);
        let h = 2f64.sqrt() / 2.0;
        let want = (1.0 * h + 0.0 * h) / (1.0 * (h * h + h * h).sqrt());
        assert!((ortho(&[vec![1.0, 0.0], vec![h, h]]) - want).abs() < 1e-12);
        assert!((want - 0.707107).abs() < 1e-6);
    }

    #[test]
    fn single_valid_key_returns_its_value_row() {
        let (reg, p) = params(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(&reg);
        let prompt = g.constant(Tensor::randn(3, 4, 1.0, &mut rng));
        let mix = g.constant(Tensor::randn(5, 4, 1.0, &mut rng));
        let pure = decouple(&mut g, &p, prompt, mix, 1).unwrap();
        let first = g.slice_rows(mix, 0, 1).unwrap();
        let v = p.w1v.forward(&mut g, first).unwrap();
        let (pure, v) = (g.value(pure).clone(), g.value(v).clone());
        assert_eq!(pure.shape(), &[3, 4]);
        for r in 0..3 {
            for c in 0..4 {
                assert!((pure.get(r, c) - v.get(0, c)).abs() < 1e-12);
            }
        }
        assert!(decouple(&mut g, &p, prompt, mix, 0).is_err());
    }

    #[test]
    fn masked_mix_rows_never_reach_h_pure() {
        let (reg, p) = params(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prompt = Tensor::randn(2, 4, 1.0, &mut rng);
        let mut mix = Tensor::randn(6, 4, 1.0, &mut rng);
        let run = |mix: &Tensor| {
            let mut g = Graph::new(&reg);
            let a = g.constant(prompt.clone());
            let b = g.constant(mix.clone());
            let out = decouple(&mut g, &p, a, b, 4).unwrap();
            g.value(out).clone()
        };
        let before = run(&mix);
        mix.row_slice_mut(5)[1] = 40.0;
        assert_eq!(run(&mix), before);
    }

    #[test]
    fn align_shape_and_alternatives() {
        let (mut reg, p) = params(4, 6);
        let cfg = p.cfg;
        let concat = AltFusionParams::new(&mut reg, FusionStrategy::Concat, cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mlp = AltFusionParams::new(&mut reg, FusionStrategy::Mlp, cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(&reg);
        let h_rs = g.constant(Tensor::randn(1, 6, 1.0, &mut rng));
        let pure = g.constant(Tensor::randn(3, 6, 1.0, &mut rng));
        let a = align(&mut g, &p, h_rs, pure).unwrap();
        assert_eq!(g.value(a).shape(), &[1, 6]);
        let zero = g.constant(Tensor::zeros(3, 6));
        let c = alternative_fusion(&mut g, &concat, h_rs, zero).unwrap();
        let z1 = g.constant(Tensor::zeros(1, 6));
        let x = g.concat_cols(&[h_rs, z1]).unwrap();
        let direct = concat.l1.forward(&mut g, x).unwrap();
        assert_eq!(g.value(c), g.value(direct));
        let m1 = alternative_fusion(&mut g, &mlp, h_rs, pure).unwrap();
        let m2 = alternative_fusion(&mut g, &mlp, h_rs, pure).unwrap();
        assert_eq!(g.value(m1), g.value(m2));
        assert_eq!(g.value(m1).shape(), &[1, 6]);
        assert!("attention".parse::<FusionStrategy>().is_err());
    }

    #[test]
    fn pooled_knowledge_is_one_row() {
        let (reg, p) = params(4, 4);
        let mut g = Graph::new(&reg);
        let mix = g.constant(Tensor::filled(5, 4, 1.0));
        let k = pooled_knowledge(&mut g, &p, mix, 3).unwrap();
        assert_eq!(g.value(k).shape(), &[1, 4]);
    }
}
