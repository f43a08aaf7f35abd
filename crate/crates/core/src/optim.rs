//! AdamW with per-group learning rates and global-norm clipping.

use std::collections::HashMap;

use crate::diffcore::{Gradients, ParamId, ParameterRegistry, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub ids: Vec<ParamId>,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// First and second moments of `id`, once it has been stepped.
    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(&id)
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor, v: Tensor) {
        self.moments.insert(id, (m, v));
    }

    /// One update of every group; ids without a gradient are skipped.
    pub fn step(&mut self, registry: &mut ParameterRegistry, grads: &Gradients, groups: &[ParamGroup]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for group in groups {
            for &id in &group.ids {
                if registry.is_frozen(id) {
                    continue;
                }
                let Some(g) = grads.get(id) else { continue };
                let (m, v) = self
                    .moments
                    .entry(id)
                    .or_insert_with(|| (Tensor::zeros_like(g), Tensor::zeros_like(g)));
                let w = registry.value_mut(id);
                let (wd, lr) = (group.weight_decay, group.lr);
                for i in 0..g.len() {
                    let gi = g.data()[i];
                    let mi = &mut m.data_mut()[i];
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    let vi = &mut v.data_mut()[i];
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let mhat = m.data()[i] / bc1;
                    let vhat = v.data()[i] / bc2;
                    let wi = &mut w.data_mut()[i];
                    *wi -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *wi);
                }
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if max_norm > 0.0 && n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Graph;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut reg = ParameterRegistry::new();
        let w = reg.register("w", Tensor::row(vec![3.0, -2.0]), false).unwrap();
        let mut opt = AdamW::default();
        let groups = [ParamGroup {
            ids: vec![w],
            lr: 0.1,
            weight_decay: 0.0,
        }];
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::new(&reg);
                let x = g.param(w);
                let sq = g.mul(x, x).unwrap();
                let l = g.sum(sq).unwrap();
                g.backward(l).unwrap().into_params()
            };
            opt.step(&mut reg, &grads, &groups);
        }
        assert!(reg.value(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut reg = ParameterRegistry::new();
        let w = reg.register("w", Tensor::scalar(1.0), false).unwrap();
        let mut grads = Gradients::with_len(1);
        grads.add(w, Tensor::scalar(0.25));
        let mut opt = AdamW::default();
        let groups = [ParamGroup {
            ids: vec![w],
            lr: 0.01,
            weight_decay: 0.0,
        }];
        opt.step(&mut reg, &grads, &groups);
        assert!((reg.value(w).item() - 0.99).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut grads = Gradients::with_len(1);
        grads.add(ParamId(0), Tensor::row(vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
