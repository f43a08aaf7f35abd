//! Training loop, parameter groups, early stopping and checkpoints.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{TrainConfig, Variant, CONFIG_KEYS};
pub use model::{CocoModel, Decisions, LlmPath, LossOutput, Representation, ScoringRows};

use std::collections::HashSet;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contradiction::LossBundle;
use crate::corpus::{make_batches, Batch, EvalSplit, InteractionDataset};
use crate::diffcore::{Gradients, Graph};
use crate::error::{CocoError, Result};
use crate::evalkit::{evaluate, EpochLog, EvalOptions, LossMeans, MetricsReport};
use crate::optim::{clip_global_norm, AdamW, ParamGroup};

const DROPOUT_STREAM: u64 = 0x636f_636f;

/// Everything that evolves during training.
#[derive(Debug)]
pub struct TrainState {
    pub model: CocoModel,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    /// Drives LoRA dropout and codebook repair.
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub bundle: LossBundle,
    /// Rows with `M = 1`, when the variant has a language path.
    pub masked_rows: Option<usize>,
    /// Selected private prompts summed over rows, when selection is on.
    pub selected_total: Option<usize>,
    pub rows: usize,
    pub grad_norm: f64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, d: &InteractionDataset) -> Result<Self> {
        Ok(Self {
            model: CocoModel::build(cfg, d)?,
            optimizer: AdamW::default(),
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM),
        })
    }

    /// The two optimizer groups: LoRA adapters and every other trainable
    /// entry. `con` drops the LoRA group, so adapters never move.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let cfg = &self.model.cfg;
        let lora: HashSet<_> = self.model.lora_ids().into_iter().collect();
        let rest = self
            .model
            .registry
            .trainable_ids()
            .into_iter()
            .filter(|id| !lora.contains(id))
            .collect();
        let mut groups = vec![ParamGroup {
            ids: rest,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
        }];
        if cfg.variant != Variant::Con && !lora.is_empty() {
            let mut ids: Vec<_> = lora.into_iter().collect();
            ids.sort();
            groups.push(ParamGroup {
                ids,
                lr: cfg.lr_lora,
                weight_decay: cfg.weight_decay,
            });
        }
        groups
    }

    /// Loss and raw (unclipped) parameter gradients of one batch, without
    /// updating anything. Dropout is off.
    pub fn gradients(&self, batch: &Batch, fixed: &Decisions) -> Result<(LossOutput, Gradients)> {
        let mut g = Graph::new(&self.model.registry);
        let out = self.model.loss(&mut g, batch, fixed, None)?;
        let grads = g.backward(out.total)?.into_params();
        Ok((out, grads))
    }
}

/// One optimization step: forward, total loss, backward, clipping, AdamW on
/// the trainable groups, then re-drawing any collapsed codebook row.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    train_step_with(state, batch, &Decisions::default())
}

/// [`train_step`] with non-differentiable decisions held fixed.
pub fn train_step_with(state: &mut TrainState, batch: &Batch, fixed: &Decisions) -> Result<StepReport> {
    let groups = state.param_groups();
    let TrainState {
        model,
        optimizer,
        rng,
        step,
        ..
    } = state;
    let (out, mut grads) = {
        let mut g = Graph::new(&model.registry);
        let out = model.loss(&mut g, batch, fixed, Some(rng))?;
        let grads = g.backward(out.total)?.into_params();
        (out, grads)
    };
    let grad_norm = clip_global_norm(&mut grads, model.cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(CocoError::NonFiniteLoss("gradient of L_total"));
    }
    optimizer.step(&mut model.registry, &grads, &groups);
    if let Some(llm) = &model.llm {
        llm.codebook.repair(&mut model.registry, rng);
    }
    *step += 1;
    Ok(StepReport {
        bundle: out.bundle,
        masked_rows: out.mask.as_ref().map(|m| m.iter().filter(|&&b| b).count()),
        selected_total: model
            .cfg
            .variant
            .uses_selection()
            .then(|| out.selections.iter().map(|s| s.selected.len()).sum()),
        rows: batch.len(),
        grad_norm,
    })
}

/// Early stopping on a score to maximize; ties keep the earlier epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since: 0,
        }
    }

    /// Records `score` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if !(score > b) => {
                self.since += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.since = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.since >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

/// Result of [`fit`]: the best state and its test evaluation (with the
/// per-epoch history attached) plus the matching valid evaluation.
#[derive(Debug)]
pub struct FitOutput {
    pub state: TrainState,
    pub report: MetricsReport,
    pub valid: MetricsReport,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64)
}

/// Runs one epoch of shuffled batches; returns loss means, M-fraction and
/// mean m over rows.
pub fn run_epoch(state: &mut TrainState, d: &InteractionDataset) -> Result<(usize, LossMeans, Option<f64>, Option<f64>)> {
    let cfg = state.model.cfg.clone();
    let mut sums = LossMeans::default();
    let (mut steps, mut rows) = (0usize, 0usize);
    let (mut masked, mut selected) = (None::<usize>, None::<usize>);
    for batch in make_batches(d, cfg.batch_size, cfg.t_max, epoch_seed(cfg.seed, state.epoch + 1))? {
        let r = train_step(state, &batch)?;
        sums.l_r += r.bundle.l_r;
        sums.l_aux += r.bundle.l_aux;
        sums.l_ortho += r.bundle.l_ortho;
        sums.l_q += r.bundle.l_q;
        sums.total += r.bundle.total;
        steps += 1;
        rows += r.rows;
        if let Some(m) = r.masked_rows {
            *masked.get_or_insert(0) += m;
        }
        if let Some(s) = r.selected_total {
            *selected.get_or_insert(0) += s;
        }
    }
    if steps == 0 {
        return Err(CocoError::Model("training split yields no batch of two or more rows".into()));
    }
    state.epoch += 1;
    let n = steps as f64;
    let means = LossMeans {
        l_r: sums.l_r / n,
        l_aux: sums.l_aux / n,
        l_ortho: sums.l_ortho / n,
        l_q: sums.l_q / n,
        total: sums.total / n,
    };
    let frac = |c: Option<usize>| c.map(|c| c as f64 / rows as f64);
    let mean_m = if cfg.variant == Variant::Soft { Some(1.0) } else { frac(selected) };
    Ok((steps, means, frac(masked), mean_m))
}

pub fn fit(d: &InteractionDataset, cfg: &TrainConfig) -> Result<FitOutput> {
    fit_with_log(d, cfg, None)
}

/// Trains with early stopping on valid R@5, writing one JSON object per
/// epoch to `log`, then restores the best epoch and evaluates the test
/// split.
pub fn fit_with_log(d: &InteractionDataset, cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<FitOutput> {
    cfg.validate()?;
    if !d.is_split() {
        return Err(crate::corpus::CorpusError::NotSplit.into());
    }
    let mut state = TrainState::new(cfg, d)?;
    let opts = EvalOptions::new(&cfg.eval_ks);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best = None;
    let mut best_valid = None;
    for _ in 0..cfg.epochs {
        let (steps, loss, m_fraction, mean_m) = run_epoch(&mut state, d)?;
        let valid = evaluate(&state.model, d, EvalSplit::Valid, &opts)?;
        let entry = EpochLog {
            epoch: state.epoch,
            steps,
            loss,
            valid_recall: valid.recall.clone(),
            valid_ndcg: valid.ndcg.clone(),
            m_fraction,
            mean_m,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?)?;
        }
        history.push(entry);
        if stopper.observe(state.epoch, valid.recall_at(5).expect("eval_ks includes 5")) {
            best = Some(Snapshot::take(&state));
            best_valid = Some(valid);
        }
        if stopper.should_stop() {
            break;
        }
    }
    if let Some(s) = best {
        s.restore(&mut state);
    }
    let loss_means = stopper
        .best_epoch()
        .and_then(|e| history.iter().find(|h| h.epoch == e))
        .map(|h| h.loss);
    let mut valid = match best_valid {
        Some(v) => v,
        None => evaluate(&state.model, d, EvalSplit::Valid, &opts)?,
    };
    let mut report = evaluate(&state.model, d, EvalSplit::Test, &opts)?;
    for r in [&mut report, &mut valid] {
        r.epoch = state.epoch;
        r.loss_means = loss_means;
    }
    report.history = history;
    Ok(FitOutput { state, report, valid })
}

struct Snapshot {
    values: Vec<crate::diffcore::Tensor>,
    optimizer: AdamW,
    epoch: usize,
    step: u64,
    rng: ChaCha8Rng,
}

impl Snapshot {
    fn take(s: &TrainState) -> Self {
        Self {
            values: s.model.registry.snapshot(),
            optimizer: s.optimizer.clone(),
            epoch: s.epoch,
            step: s.step,
            rng: s.rng.clone(),
        }
    }

    fn restore(self, s: &mut TrainState) {
        s.model.registry.restore(&self.values);
        s.optimizer = self.optimizer;
        s.epoch = self.epoch;
        s.step = self.step;
        s.rng = self.rng;
    }
}
