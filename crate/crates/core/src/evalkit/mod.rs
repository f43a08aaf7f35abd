//! Leave-one-out ranking metrics, evaluation reports, ablations, sweeps and
//! exports.

mod export;
mod sweep;

pub use export::{
    export_embeddings, export_m_histogram, read_report_json, write_metrics_csv, write_report_json, METRICS_CSV_HEADER,
};
pub use sweep::{parse_grid, sweep, GridAxis, SweepOutcome, SweepRow};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{EvalSplit, InteractionDataset};
use crate::error::{CocoError, Result};
use crate::trainer::{fit, CocoModel, TrainConfig, Variant};

/// Revision tag stamped on every report.
pub const REVISION: &str = concat!("coco-", env!("CARGO_PKG_VERSION"));

const EVAL_CHUNK: usize = 64;

/// `1` iff the 1-based `rank` lies within the top `k`.
pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-target NDCG: `1 / log2(rank + 1)` inside the top `k`, else `0`.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `target`; equal scores are ordered by ascending index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < target))
        .count()
}

/// Mean R@K and N@K over `ranks`, summed in the given order.
pub fn mean_metrics(ranks: &[usize], ks: &[usize]) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let n = ranks.len() as f64;
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        recall.insert(k, ranks.iter().map(|&r| recall_at_k(r, k)).sum::<f64>() / n);
        ndcg.insert(k, ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n);
    }
    (recall, ndcg)
}

/// The metric path of [`evaluate`] applied to precomputed score rows.
pub fn evaluate_scores(
    scores: &[Vec<f64>],
    targets: &[usize],
    ks: &[usize],
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>)> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(CocoError::Model("one target per score row is required".into()));
    }
    if let Some(r) = (0..scores.len()).find(|&r| targets[r] >= scores[r].len()) {
        return Err(CocoError::Model(format!("target {} outside row {r}", targets[r])));
    }
    let ranks: Vec<usize> = scores.iter().zip(targets).map(|(s, &t)| rank_of(s, t)).collect();
    Ok(mean_metrics(&ranks, ks))
}

/// Mean training-loss terms over one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub l_r: f64,
    pub l_aux: f64,
    pub l_ortho: f64,
    pub l_q: f64,
    pub total: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossMeans,
    pub valid_recall: BTreeMap<usize, f64>,
    pub valid_ndcg: BTreeMap<usize, f64>,
    /// Fraction of training rows with `M = 1`.
    pub m_fraction: Option<f64>,
    /// Mean number of selected private prompts over training rows.
    pub mean_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    pub revision: String,
    pub split: EvalSplit,
    /// Epoch of the evaluated parameters (0 = untrained).
    pub epoch: usize,
    pub n_users: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub loss_means: Option<LossMeans>,
    /// `K + 1` bins: users with `m = 0..=K` selected private prompts.
    pub m_hist: Option<Vec<usize>>,
    pub mean_m: Option<f64>,
    /// Fraction of evaluated users whose aligned vector beats `h_RS`.
    pub m_fraction: Option<f64>,
    pub history: Vec<EpochLog>,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Route scoring vectors through the gradient mask (value-preserving).
    pub masking: bool,
    /// Worker threads; `0` uses the available parallelism.
    pub threads: usize,
}

impl EvalOptions {
    pub fn new(ks: &[usize]) -> Self {
        Self {
            ks: ks.to_vec(),
            masking: false,
            threads: 0,
        }
    }
}

struct UserOutcome {
    rank: usize,
    m: Option<usize>,
    benefit: Option<bool>,
}

fn score_chunk(model: &CocoModel, d: &InteractionDataset, split: EvalSplit, users: &[usize], masking: bool) -> Result<Vec<UserOutcome>> {
    let table = model.registry.value(model.backbone.item_emb);
    let mut out = Vec::with_capacity(users.len());
    for chunk in users.chunks(EVAL_CHUNK) {
        let mut prefixes = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for &u in chunk {
            let (p, t) = d.eval_case(u, split)?;
            prefixes.push(p);
            targets.push(t);
        }
        let rows = model.user_vectors(chunk, &prefixes, Some(&targets), masking)?;
        for (r, &t) in targets.iter().enumerate() {
            let u = rows.vectors.row_slice(r);
            let scores: Vec<f64> = (0..table.rows())
                .map(|i| u.iter().zip(table.row_slice(i)).map(|(a, b)| a * b).sum())
                .collect();
            out.push(UserOutcome {
                rank: rank_of(&scores, t),
                m: model
                    .cfg
                    .variant
                    .uses_selection()
                    .then(|| rows.selections[r].selected.len()),
                benefit: rows.mask.as_ref().map(|m| m[r]),
            });
        }
    }
    Ok(out)
}

/// Ranks every user's held-out item against the full catalog by dot
/// product and averages R@K / N@K in user order.
pub fn evaluate(model: &CocoModel, d: &InteractionDataset, split: EvalSplit, opts: &EvalOptions) -> Result<MetricsReport> {
    if d.catalog_fingerprint() != model.catalog_fingerprint || d.n_items() != model.n_items() {
        return Err(CocoError::CatalogMismatch(format!(
            "model was trained on {} items with a different catalog than the {} given",
            model.n_items(),
            d.n_items()
        )));
    }
    if d.n_users() != model.n_users {
        return Err(CocoError::CatalogMismatch(format!(
            "model knows {} users, dataset has {}",
            model.n_users,
            d.n_users()
        )));
    }
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(CocoError::Config("evaluation cutoffs must be positive".into()));
    }
    let users: Vec<usize> = (0..d.n_users()).collect();
    let threads = match opts.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let per = users.len().div_ceil(threads.max(1)).max(1);
    let outcomes: Vec<UserOutcome> = if threads <= 1 || users.len() <= EVAL_CHUNK {
        score_chunk(model, d, split, &users, opts.masking)?
    } else {
        let parts: Vec<Result<Vec<UserOutcome>>> = std::thread::scope(|s| {
            let handles: Vec<_> = users
                .chunks(per)
                .map(|c| s.spawn(move || score_chunk(model, d, split, c, opts.masking)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(users.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };

    let n = outcomes.len() as f64;
    let ranks: Vec<usize> = outcomes.iter().map(|o| o.rank).collect();
    let (recall, ndcg) = mean_metrics(&ranks, &opts.ks);
    let (m_hist, mean_m) = if model.cfg.variant.uses_selection() {
        let mut hist = vec![0; model.cfg.k + 1];
        let mut total = 0;
        for o in &outcomes {
            let m = o.m.expect("selection recorded");
            hist[m] += 1;
            total += m;
        }
        (Some(hist), Some(total as f64 / n))
    } else if model.cfg.variant == Variant::Soft {
        (None, Some(1.0))
    } else {
        (None, None)
    };
    let m_fraction = outcomes
        .iter()
        .map(|o| o.benefit)
        .collect::<Option<Vec<bool>>>()
        .map(|b| b.iter().filter(|&&x| x).count() as f64 / n);
    Ok(MetricsReport {
        run_id: format!("{}-{}", model.cfg.variant, model.cfg.hash()),
        variant: model.cfg.variant.to_string(),
        config_hash: model.cfg.hash(),
        seed: model.cfg.seed,
        revision: REVISION.to_string(),
        split,
        epoch: 0,
        n_users: outcomes.len(),
        recall,
        ndcg,
        loss_means: None,
        m_hist,
        mean_m,
        m_fraction,
        history: Vec::new(),
    })
}

/// Trains and evaluates one ablation variant with otherwise identical
/// settings.
pub fn ablate(variant: Variant, d: &InteractionDataset, cfg: &TrainConfig) -> Result<MetricsReport> {
    let mut cfg = cfg.clone();
    cfg.variant = variant;
    Ok(fit(d, &cfg)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_spot_values() {
        assert_eq!(recall_at_k(1, 5), 1.0);
        assert_eq!(recall_at_k(5, 5), 1.0);
        assert_eq!(recall_at_k(6, 5), 0.0);
        assert_eq!(ndcg_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(3, 5), 0.5);
        assert_eq!(ndcg_at_k(7, 5), 0.0);
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let s = [0.5, 0.9, 0.5, 0.5];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 0), 2);
        assert_eq!(rank_of(&s, 2), 3);
        assert_eq!(rank_of(&s, 3), 4);
    }
}
