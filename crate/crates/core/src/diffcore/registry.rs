//! Named parameter storage with per-entry frozen flags.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

/// Stable handle into a [`ParameterRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    grad: Option<Tensor>,
}

impl ParamEntry {
    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Registration-ordered collection of tensors.
///
/// Trainable entries carry a gradient accumulator of the same shape; frozen
/// entries never do, so nothing can be accumulated into them.
#[derive(Debug, Clone, Default)]
pub struct ParameterRegistry {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        frozen: bool,
    ) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let id = ParamId(self.entries.len());
        let grad = (!frozen).then(|| Tensor::new(value.shape().to_vec(), vec![0.0; value.len()]))
            .transpose()?;
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            frozen,
            grad,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes an entry and drops its accumulator.
    pub fn freeze(&mut self, id: ParamId) {
        let e = &mut self.entries[id.0];
        e.frozen = true;
        e.grad = None;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    /// Adds `grads` into the accumulators of trainable entries.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.grads.iter().enumerate() {
            if let (Some(g), Some(acc)) = (g, self.entries.get_mut(i).and_then(|e| e.grad.as_mut()))
            {
                acc.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            if let Some(g) = e.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Snapshot of all values, for comparing states across steps.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            e.value = v.clone();
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn with_len(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn add(&mut self, id: ParamId, g: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g.clone());
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// True when every entry is absent or exactly zero.
    pub fn is_zero_for(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut reg = ParameterRegistry::new();
        reg.register("w", Tensor::zeros(1, 1), false).unwrap();
        assert!(matches!(
            reg.register("w", Tensor::zeros(1, 1), false),
            Err(DiffError::DuplicateParam(_))
        ));
    }

    #[test]
    fn frozen_entries_never_accumulate() {
        let mut reg = ParameterRegistry::new();
        let a = reg.register("a", Tensor::zeros(1, 2), false).unwrap();
        let b = reg.register("b", Tensor::zeros(1, 2), true).unwrap();
        let mut g = Gradients::with_len(2);
        g.add(a, Tensor::row(vec![1.0, 2.0]));
        g.add(b, Tensor::row(vec![3.0, 4.0]));
        reg.accumulate(&g);
        reg.accumulate(&g);
        assert_eq!(reg.entry(a).grad().unwrap().data(), &[2.0, 4.0]);
        assert!(reg.entry(b).grad().is_none());
        reg.zero_grad();
        assert_eq!(reg.entry(a).grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn iteration_order_follows_registration() {
        let mut reg = ParameterRegistry::new();
        for name in ["z", "a", "m"] {
            reg.register(name, Tensor::zeros(1, 1), false).unwrap();
        }
        let names: Vec<_> = reg.iter().map(|(_, e)| e.name.as_str()).collect();
        assert_eq!(names, ["z", "a", "m"]);
    }
}
