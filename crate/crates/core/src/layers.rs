//! Parameter blocks shared by the backbone, the toy language model and the
//! fusion heads.

use rand::Rng;

use crate::diffcore::{DiffError, Graph, ParamId, ParameterRegistry, Tensor, Var};

/// Registers tensors under a common name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub registry: &'a mut ParameterRegistry,
    pub rng: &'a mut R,
    prefix: String,
    pub frozen: bool,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(registry: &'a mut ParameterRegistry, rng: &'a mut R, prefix: &str, frozen: bool) -> Self {
        Self {
            registry,
            rng,
            prefix: prefix.to_string(),
            frozen,
        }
    }

    fn name(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<ParamId, DiffError> {
        let full = self.name(name);
        self.registry.register(full, t, self.frozen)
    }

    pub fn randn(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId, DiffError> {
        let t = Tensor::randn(rows, cols, std, self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, DiffError> {
        self.tensor(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, DiffError> {
        self.tensor(name, Tensor::filled(rows, cols, 1.0))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear, DiffError> {
        let w = self.randn(&format!("{name}.w"), d_in, d_out, (1.0 / d_in as f64).sqrt())?;
        let b = if bias {
            Some(self.zeros(&format!("{name}.b"), 1, d_out)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNormParams, DiffError> {
        Ok(LayerNormParams {
            gain: self.ones(&format!("{name}.g"), 1, d)?,
            bias: self.zeros(&format!("{name}.b"), 1, d)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, DiffError> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, DiffError> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// A contiguous run of rows in a stacked matrix that attend among
/// themselves. Keys at offsets `>= valid` are masked out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

impl Segment {
    pub fn full(start: usize, len: usize) -> Self {
        Self {
            start,
            len,
            valid: len,
        }
    }
}

/// Attention mask of shape `n_q × n_k`; `true` means the key is visible.
pub fn attention_mask(n_q: usize, n_k: usize, valid_keys: usize, causal: bool) -> Vec<bool> {
    let mut mask = vec![false; n_q * n_k];
    for i in 0..n_q {
        for j in 0..n_k.min(valid_keys) {
            if !causal || j <= i {
                mask[i * n_k + j] = true;
            }
        }
    }
    mask
}

/// Scaled dot-product attention for one query block against one key block,
/// split into `heads` column groups.
pub fn attend(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var, DiffError> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(DiffError::Invalid(format!("{d} columns do not split into {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let p = g.softmax_rows(s, mask)?;
        outs.push(g.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Causal self-attention over independent segments of stacked `q`, `k`, `v`.
pub fn segmented_self_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    segments: &[Segment],
    heads: usize,
) -> Result<Var, DiffError> {
    if segments.len() == 1 && segments[0].start == 0 && segments[0].len == g.value(q).rows() {
        let s = segments[0];
        let mask = attention_mask(s.len, s.len, s.valid, true);
        return attend(g, q, k, v, heads, Some(&mask));
    }
    let mut outs = Vec::with_capacity(segments.len());
    for s in segments {
        let qs = g.slice_rows(q, s.start, s.start + s.len)?;
        let ks = g.slice_rows(k, s.start, s.start + s.len)?;
        let vs = g.slice_rows(v, s.start, s.start + s.len)?;
        let mask = attention_mask(s.len, s.len, s.valid, true);
        outs.push(attend(g, qs, ks, vs, heads, Some(&mask))?);
    }
    g.concat_rows(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_hides_future_and_padding() {
        let m = attention_mask(4, 4, 3, true);
        let rows: Vec<Vec<bool>> = m.chunks(4).map(<[bool]>::to_vec).collect();
        assert_eq!(rows[0], [true, false, false, false]);
        assert_eq!(rows[2], [true, true, true, false]);
        // a padding query still sees every valid key, never padding keys
        assert_eq!(rows[3], [true, true, true, false]);
    }

    #[test]
    fn cross_mask_ignores_causality() {
        let m = attention_mask(2, 3, 2, false);
        assert_eq!(m, [true, true, false, true, true, false]);
    }
}
