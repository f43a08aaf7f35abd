//! Per-sample benefit indicator, gradient masking and the weighted total loss.

use serde::{Deserialize, Serialize};

use crate::diffcore::{cosine, Graph, Tensor, Var};
use crate::error::{CocoError, Result};

/// `true` iff `cos(h_aligned, v_t) > cos(h_RS, v_t)`.
pub fn indicator(h_aligned: &[f64], h_rs: &[f64], v_t: &[f64]) -> Result<bool> {
    Ok(cosine(h_aligned, v_t)? > cosine(h_rs, v_t)?)
}

/// Row-wise [`indicator`] over `B × d` matrices.
pub fn decision_mask(h_aligned: &Tensor, h_rs: &Tensor, targets: &Tensor) -> Result<Vec<bool>> {
    if h_aligned.dims() != h_rs.dims() || h_rs.dims() != targets.dims() {
        return Err(CocoError::Model("decision mask inputs differ in shape".into()));
    }
    (0..h_rs.rows())
        .map(|r| indicator(h_aligned.row_slice(r), h_rs.row_slice(r), targets.row_slice(r)))
        .collect()
}

/// `sg(M ⊙ h) + (1 − M) ⊙ h`: the value is `h` unchanged, and rows with
/// `M = 1` pass no adjoint upstream.
pub fn gradient_mask(g: &mut Graph<'_>, h_aligned: Var, m: &[bool]) -> Result<Var> {
    if m.len() != g.value(h_aligned).rows() {
        return Err(CocoError::Model(format!(
            "mask has {} rows, input {}",
            m.len(),
            g.value(h_aligned).rows()
        )));
    }
    let on: Vec<f64> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let off: Vec<f64> = on.iter().map(|v| 1.0 - v).collect();
    let kept = g.row_mask(h_aligned, &on)?;
    let frozen = g.stop_gradient(kept)?;
    let live = g.row_mask(h_aligned, &off)?;
    Ok(g.add(frozen, live)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.15,
            gamma: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(CocoError::Config(format!("loss weight {n} = {w} must be >= 0")));
            }
        }
        Ok(())
    }

    /// `l_r + α·l_aux + β·l_ortho + γ·l_q`, evaluated left to right.
    pub fn combine(&self, l_r: f64, l_aux: f64, l_ortho: f64, l_q: f64) -> f64 {
        l_r + self.alpha * l_aux + self.beta * l_ortho + self.gamma * l_q
    }
}

/// Values of every loss term of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_r: f64,
    pub l_aux: f64,
    pub l_ortho: f64,
    pub l_q: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    pub fn recombine(&self) -> f64 {
        self.weights.combine(self.l_r, self.l_aux, self.l_ortho, self.l_q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub l_r: Var,
    pub l_aux: Var,
    pub l_ortho: Var,
    pub l_q: Var,
}

/// Builds the weighted total in the graph; the reported total is the graph
/// value itself, so it equals [`LossBundle::recombine`] bitwise.
pub fn total_loss(g: &mut Graph<'_>, terms: LossTerms, w: LossWeights) -> Result<(Var, LossBundle)> {
    w.validate()?;
    let mut vals = [0.0; 4];
    for (i, (name, v)) in [
        ("L_r", terms.l_r),
        ("L_aux", terms.l_aux),
        ("L_ortho", terms.l_ortho),
        ("L_Q", terms.l_q),
    ]
    .into_iter()
    .enumerate()
    {
        let x = g.scalar(v)?;
        if !x.is_finite() {
            return Err(CocoError::NonFiniteLoss(name));
        }
        vals[i] = x;
    }
    let a = g.scale(terms.l_aux, w.alpha)?;
    let t = g.add(terms.l_r, a)?;
    let b = g.scale(terms.l_ortho, w.beta)?;
    let t = g.add(t, b)?;
    let c = g.scale(terms.l_q, w.gamma)?;
    let total = g.add(t, c)?;
    let bundle = LossBundle {
        l_r: vals[0],
        l_aux: vals[1],
        l_ortho: vals[2],
        l_q: vals[3],
        weights: w,
        total: g.scalar(total)?,
    };
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParameterRegistry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn indicator_is_strict() {
        assert!(indicator(&[0.9, 0.1], &[0.1, 0.9], &[1.0, 0.0]).unwrap());
        assert!(!indicator(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 1.0]).unwrap());
        assert!(!indicator(&[2.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).unwrap());
        assert!(indicator(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn mask_keeps_values_and_blocks_marked_rows() {
        let mut reg = ParameterRegistry::new();
        let h = reg.register("h", Tensor::randn(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(0)), false).unwrap();
        let mut g = Graph::new(&reg);
        let hv = g.param(h);
        let out = gradient_mask(&mut g, hv, &[true, false, true]).unwrap();
        assert_eq!(g.value(out), reg.value(h));
        let l = g.sum(out).unwrap();
        let grad = g.backward(l).unwrap().into_params();
        let gh = grad.get(h).unwrap();
        assert!(gh.row_slice(0).iter().all(|&v| v == 0.0));
        assert!(gh.row_slice(1).iter().all(|&v| v == 1.0));
        assert!(gh.row_slice(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_total_examples() {
        let reg = ParameterRegistry::new();
        let mut g = Graph::new(&reg);
        let t = |g: &mut Graph<'_>, v| g.constant(Tensor::scalar(v));
        let terms = LossTerms {
            l_r: t(&mut g, 1.0),
            l_aux: t(&mut g, 2.0),
            l_ortho: t(&mut g, 3.0),
            l_q: t(&mut g, 4.0),
        };
        let (_, b) = total_loss(&mut g, terms, LossWeights::default()).unwrap();
        assert!((b.total - 2.85).abs() < 1e-12);
        assert_eq!(b.total, b.recombine());
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let (_, b) = total_loss(&mut g, terms, zero).unwrap();
        assert_eq!(b.total, 1.0);
        let neg = LossWeights {
            alpha: -1.0,
            ..zero
        };
        assert!(total_loss(&mut g, terms, neg).is_err());
    }
}
