use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};

use super::{CorpusError, InteractionDataset, ItemMeta};

/// Parameters of the category-chain generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// Probability that the next category follows the chain rule.
    pub signal: f64,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent of item popularity inside a category.
    pub popularity_skew: f64,
}

impl SynthConfig {
    pub fn new(n_users: usize, n_items: usize, n_categories: usize, signal: f64, seed: u64) -> Self {
        Self {
            n_users,
            n_items,
            n_categories,
            signal,
            seed,
            min_len: 5,
            max_len: 10,
            popularity_skew: 1.0,
        }
    }
}

/// Generates users whose next category is `successor(previous category)` with
/// probability `signal` and uniform otherwise. Titles carry the category
/// token (`CAT3 item 17`), so the chain is readable from recent titles.
pub fn synth_generate(cfg: &SynthConfig) -> Result<InteractionDataset, CorpusError> {
    if cfg.n_categories < 2 {
        return Err(CorpusError::Invalid("n_categories must be at least 2".into()));
    }
    if cfg.n_items < cfg.n_categories {
        return Err(CorpusError::Invalid("n_items must be >= n_categories".into()));
    }
    if !(0.0..=1.0).contains(&cfg.signal) {
        return Err(CorpusError::Invalid(format!("signal {} outside [0, 1]", cfg.signal)));
    }
    if cfg.n_users == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(CorpusError::Invalid("need n_users >= 1 and 1 <= min_len <= max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.n_categories;
    let catalog: Vec<ItemMeta> = (0..cfg.n_items)
        .map(|i| ItemMeta {
            item_id: format!("i{i}"),
            title: format!("CAT{} item {i}", i % c),
            category: format!("cat{}", i % c),
            dense_index: i,
        })
        .collect();

    // random cyclic order: a successor function with no fixed points
    let mut cycle: Vec<usize> = (0..c).collect();
    cycle.shuffle(&mut rng);
    let mut successor = vec![0; c];
    for k in 0..c {
        successor[cycle[k]] = cycle[(k + 1) % c];
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for i in 0..cfg.n_items {
        members[i % c].push(i);
    }
    let samplers: Vec<(Vec<usize>, WeightedIndex<f64>)> = members
        .into_iter()
        .map(|mut items| {
            items.shuffle(&mut rng);
            let w: Vec<f64> = (0..items.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew))
                .collect();
            (items, WeightedIndex::new(w).expect("positive weights"))
        })
        .collect();

    let mut events = Vec::new();
    for u in 0..cfg.n_users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut cat = rng.random_range(0..c);
        for t in 0..len {
            if t > 0 {
                cat = if rng.random::<f64>() < cfg.signal {
                    successor[cat]
                } else {
                    rng.random_range(0..c)
                };
            }
            let (items, w) = &samplers[cat];
            let item = items[w.sample(&mut rng)];
            events.push((format!("u{u}"), format!("i{item}"), 1_000 * t as i64 + u as i64));
        }
    }
    InteractionDataset::from_events(catalog, events)
}
