use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, InteractionDataset};

/// One `(history, next item)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingRow {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// Right-padded prefixes with a validity mask and in-batch negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub t_max: usize,
    /// `B × t_max`, padding slots hold `0`.
    pub items: Vec<usize>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
    /// Per row, the distinct targets of the other rows, excluding its own.
    pub negatives: Vec<Vec<usize>>,
}

impl Batch {
    /// Truncates each prefix to its most recent `t_max` items.
    pub fn from_rows(rows: &[TrainingRow], t_max: usize) -> Result<Self, CorpusError> {
        if t_max == 0 {
            return Err(CorpusError::Invalid("t_max must be at least 1".into()));
        }
        let b = rows.len();
        let mut items = vec![0; b * t_max];
        let mut mask = vec![false; b * t_max];
        let mut lengths = Vec::with_capacity(b);
        for (r, row) in rows.iter().enumerate() {
            if row.prefix.is_empty() {
                return Err(CorpusError::Invalid(format!("row {r} has an empty prefix")));
            }
            let kept = &row.prefix[row.prefix.len().saturating_sub(t_max)..];
            for (t, &it) in kept.iter().enumerate() {
                items[r * t_max + t] = it;
                mask[r * t_max + t] = true;
            }
            lengths.push(kept.len());
        }
        let targets: Vec<usize> = rows.iter().map(|r| r.target).collect();
        let negatives = (0..b)
            .map(|r| {
                let mut negs: Vec<usize> = Vec::new();
                for (j, &t) in targets.iter().enumerate() {
                    if j != r && t != targets[r] && !negs.contains(&t) {
                        negs.push(t);
                    }
                }
                negs
            })
            .collect();
        Ok(Self {
            users: rows.iter().map(|r| r.user).collect(),
            t_max,
            items,
            mask,
            lengths,
            targets,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Valid (unpadded) prefix of row `r`, oldest first.
    pub fn prefix(&self, r: usize) -> &[usize] {
        &self.items[r * self.t_max..r * self.t_max + self.lengths[r]]
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.mask[r * self.t_max..(r + 1) * self.t_max]
    }
}

/// Every `(train prefix, next item)` pair of every user, in user order.
pub fn training_rows(d: &InteractionDataset) -> Result<Vec<TrainingRow>, CorpusError> {
    let mut rows = Vec::new();
    for u in 0..d.n_users() {
        let train = d.train_items(u)?;
        for t in 1..train.len() {
            rows.push(TrainingRow {
                user: u,
                prefix: train[..t].to_vec(),
                target: train[t],
            });
        }
    }
    Ok(rows)
}

/// Shuffles all training pairs with `seed` and yields batches of `b` rows.
/// A trailing batch with a single row is dropped, since it has no negatives.
pub fn make_batches(
    d: &InteractionDataset,
    b: usize,
    t_max: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Batch>, CorpusError> {
    if b < 2 {
        return Err(CorpusError::Invalid(format!("batch size {b} < 2")));
    }
    if t_max == 0 {
        return Err(CorpusError::Invalid("t_max must be at least 1".into()));
    }
    let mut rows = training_rows(d)?;
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chunks: Vec<Vec<TrainingRow>> = rows
        .chunks(b)
        .filter(|c| c.len() >= 2)
        .map(<[TrainingRow]>::to_vec)
        .collect();
    Ok(chunks
        .into_iter()
        .map(move |c| Batch::from_rows(&c, t_max).expect("prefixes are non-empty")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{leave_one_out_split, synth_generate, SynthConfig};

    fn row(user: usize, prefix: &[usize], target: usize) -> TrainingRow {
        TrainingRow {
            user,
            prefix: prefix.to_vec(),
            target,
        }
    }

    #[test]
    fn each_row_has_b_minus_one_negatives_without_collisions() {
        let rows = [row(0, &[1], 10), row(1, &[2], 11), row(2, &[3], 12), row(3, &[4], 13)];
        let b = Batch::from_rows(&rows, 5).unwrap();
        assert!(b.negatives.iter().all(|n| n.len() == 3));
    }

    #[test]
    fn shared_targets_are_not_each_others_negatives() {
        let rows = [row(0, &[1], 10), row(1, &[2], 10), row(2, &[3], 12)];
        let b = Batch::from_rows(&rows, 5).unwrap();
        assert_eq!(b.negatives[0], vec![12]);
        assert_eq!(b.negatives[1], vec![12]);
        assert_eq!(b.negatives[2], vec![10]);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let prefix: Vec<usize> = (0..15).collect();
        let b = Batch::from_rows(&[row(0, &prefix, 99), row(1, &[1], 98)], 10).unwrap();
        assert_eq!(b.prefix(0), &(5..15).collect::<Vec<_>>()[..]);
        assert_eq!(b.prefix(1), &[1]);
        assert_eq!(b.row_mask(1).iter().filter(|m| **m).count(), 1);
    }

    #[test]
    fn batch_size_below_two_is_rejected() {
        let d = leave_one_out_split(&synth_generate(&SynthConfig::new(10, 30, 3, 0.5, 1)).unwrap()).unwrap();
        assert!(make_batches(&d, 1, 10, 0).is_err());
    }

    #[test]
    fn no_valid_or_test_leakage() {
        let d = leave_one_out_split(&synth_generate(&SynthConfig::new(50, 40, 4, 0.8, 3)).unwrap()).unwrap();
        for batch in make_batches(&d, 8, 10, 7).unwrap() {
            for r in 0..batch.len() {
                assert!(!batch.negatives[r].contains(&batch.targets[r]));
            }
        }
        let rows = training_rows(&d).unwrap();
        for r in rows {
            let train = d.train_items(r.user).unwrap();
            assert!(r.prefix.len() < train.len());
            assert_eq!(train[r.prefix.len()], r.target);
            assert_eq!(&train[..r.prefix.len()], &r.prefix[..]);
        }
    }

    #[test]
    fn batches_are_deterministic_per_seed() {
        let d = leave_one_out_split(&synth_generate(&SynthConfig::new(30, 40, 4, 0.8, 3)).unwrap()).unwrap();
        let a: Vec<_> = make_batches(&d, 4, 10, 11).unwrap().collect();
        let b: Vec<_> = make_batches(&d, 4, 10, 11).unwrap().collect();
        let c: Vec<_> = make_batches(&d, 4, 10, 12).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
