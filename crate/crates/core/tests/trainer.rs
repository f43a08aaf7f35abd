mod common;

use coco_core::corpus::{make_batches, Batch};
use coco_core::trainer::{
    fit, train_step, train_step_with, Decisions, TrainConfig, TrainState, Variant, CHECKPOINT_VERSION,
};
use coco_core::CocoError;
use common::{tiny_config, tiny_data};

fn first_batch(state: &TrainState, d: &coco_core::corpus::InteractionDataset) -> Batch {
    let cfg = &state.model.cfg;
    make_batches(d, cfg.batch_size, cfg.t_max, 7).unwrap().next().unwrap()
}

#[test]
fn base_lm_is_bitwise_frozen_across_steps() {
    let d = tiny_data(1);
    let mut s = TrainState::new(&tiny_config(Variant::Full), &d).unwrap();
    let frozen = s.model.frozen_ids();
    assert!(!frozen.is_empty());
    let before: Vec<_> = frozen.iter().map(|&id| s.model.registry.value(id).clone()).collect();
    for b in make_batches(&d, 8, 6, 3).unwrap().take(4) {
        train_step(&mut s, &b).unwrap();
    }
    for (id, v) in frozen.iter().zip(&before) {
        assert_eq!(s.model.registry.value(*id), v);
        assert!(s.model.registry.is_frozen(*id));
    }
    let names: Vec<_> = s
        .model
        .registry
        .iter()
        .filter(|(_, e)| e.frozen)
        .map(|(_, e)| e.name.clone())
        .collect();
    assert!(names.iter().all(|n| n.starts_with("lm.")));
}

#[test]
fn codebook_is_untouched_when_only_the_stopped_path_reaches_it() {
    let d = tiny_data(2);
    let mut cfg = tiny_config(Variant::Full);
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    cfg.gamma = 0.0;
    let mut s = TrainState::new(&cfg, &d).unwrap();
    let b = first_batch(&s, &d);
    let cb = s.model.llm.as_ref().unwrap().codebook;
    let (z0, sh0) = (s.model.registry.value(cb.private).clone(), s.model.registry.value(cb.shared).clone());
    let fixed = Decisions {
        selections: None,
        mask: Some(vec![true; b.len()]),
    };
    train_step_with(&mut s, &b, &fixed).unwrap();
    assert_eq!(s.model.registry.value(cb.private), &z0);
    assert_eq!(s.model.registry.value(cb.shared), &sh0);
}

#[test]
fn identical_seeds_give_identical_loss_trajectories() {
    let d = tiny_data(3);
    let cfg = tiny_config(Variant::Full);
    let run = || {
        let mut s = TrainState::new(&cfg, &d).unwrap();
        let batches: Vec<Batch> = make_batches(&d, 8, 6, 11).unwrap().collect();
        batches
            .iter()
            .cycle()
            .take(10)
            .map(|b| train_step(&mut s, b).unwrap().bundle.total)
            .collect::<Vec<f64>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn reported_total_recombines_the_terms() {
    let d = tiny_data(4);
    let mut s = TrainState::new(&tiny_config(Variant::Full), &d).unwrap();
    for b in make_batches(&d, 8, 6, 5).unwrap().take(3) {
        let r = train_step(&mut s, &b).unwrap().bundle;
        assert!((r.total - r.recombine()).abs() <= 4.0 * f64::EPSILON * r.total.abs());
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let d = tiny_data(5);
    let mut cfg = tiny_config(Variant::BackboneOnly);
    cfg.tau = 5e-324;
    let mut s = TrainState::new(&cfg, &d).unwrap();
    let b = first_batch(&s, &d);
    match train_step(&mut s, &b) {
        Err(CocoError::NonFiniteLoss(term)) => assert_eq!(term, "L_r"),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
    let mut cfg = tiny_config(Variant::BackboneOnly);
    cfg.tau = 1e-307;
    let mut s = TrainState::new(&cfg, &d).unwrap();
    let before = s.model.registry.snapshot();
    assert!(matches!(train_step(&mut s, &b), Err(CocoError::NonFiniteLoss(_))));
    assert_eq!(s.model.registry.snapshot(), before);
}

#[test]
fn zero_epochs_returns_the_initialized_model() {
    let d = tiny_data(6);
    let mut cfg = tiny_config(Variant::Full);
    cfg.epochs = 0;
    let out = fit(&d, &cfg).unwrap();
    let fresh = TrainState::new(&cfg, &d).unwrap();
    assert_eq!(out.state.epoch, 0);
    assert_eq!(out.report.epoch, 0);
    assert!(out.report.history.is_empty());
    assert_eq!(out.state.model.registry.snapshot(), fresh.model.registry.snapshot());
}

#[test]
fn early_stopping_halts_once_learning_saturates() {
    let d = tiny_data(7);
    let mut cfg = tiny_config(Variant::BackboneOnly);
    cfg.epochs = 10;
    cfg.patience = 2;
    cfg.lr = 1e-12;
    let out = fit(&d, &cfg).unwrap();
    assert_eq!(out.report.history.len(), 3);
    assert_eq!(out.report.epoch, 1);
}

#[test]
fn fit_is_deterministic() {
    let d = tiny_data(8);
    let mut cfg = tiny_config(Variant::Full);
    cfg.epochs = 2;
    let a = fit(&d, &cfg).unwrap();
    let b = fit(&d, &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.valid, b.valid);
}

#[test]
fn con_drops_the_lora_group() {
    let d = tiny_data(9);
    let s = TrainState::new(&tiny_config(Variant::Con), &d).unwrap();
    let lora = s.model.lora_ids();
    assert!(s.param_groups().iter().all(|g| g.ids.iter().all(|id| !lora.contains(id))));
    let s = TrainState::new(&tiny_config(Variant::Full), &d).unwrap();
    assert_eq!(s.param_groups().len(), 2);
}

fn trained_state() -> (TrainState, Batch) {
    let d = tiny_data(10);
    let mut s = TrainState::new(&tiny_config(Variant::Full), &d).unwrap();
    for b in make_batches(&d, 8, 6, 1).unwrap().take(3) {
        train_step(&mut s, &b).unwrap();
    }
    let b = first_batch(&s, &d);
    (s, b)
}

fn probe(s: &TrainState, b: &Batch) -> (f64, coco_core::diffcore::Tensor) {
    let prefixes: Vec<&[usize]> = (0..b.len()).map(|r| b.prefix(r)).collect();
    let (out, _) = s.gradients(b, &Decisions::default()).unwrap();
    let rows = s.model.user_vectors(&b.users, &prefixes, Some(&b.targets), false).unwrap();
    (out.bundle.total, rows.vectors)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (s, b) = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    s.save(&p1).unwrap();
    let loaded = TrainState::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(probe(&s, &b), probe(&loaded, &b));
    assert_eq!(loaded.epoch, s.epoch);
    assert_eq!(loaded.step, s.step);
    assert_eq!(loaded.rng, s.rng);
    assert_eq!(loaded.model.registry.snapshot(), s.model.registry.snapshot());
}

#[test]
fn training_resumes_identically_after_reload() {
    let (mut s, b) = trained_state();
    let mut loaded = TrainState::from_bytes(&s.to_bytes().unwrap()).unwrap();
    let x = train_step(&mut s, &b).unwrap();
    let y = train_step(&mut loaded, &b).unwrap();
    assert_eq!(x, y);
    assert_eq!(s.model.registry.snapshot(), loaded.model.registry.snapshot());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (s, _) = trained_state();
    let bytes = s.to_bytes().unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(TrainState::from_bytes(&flipped), Err(CocoError::Checkpoint(_))));
    assert!(matches!(TrainState::from_bytes(&bytes[..bytes.len() - 5]), Err(CocoError::Checkpoint(_))));
    assert!(matches!(TrainState::from_bytes(b"nope"), Err(CocoError::Checkpoint(_))));
    let mut versioned = bytes;
    versioned[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match TrainState::from_bytes(&versioned) {
        Err(e @ CocoError::VersionMismatch { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains(&(CHECKPOINT_VERSION + 1).to_string()));
            assert!(msg.contains(&CHECKPOINT_VERSION.to_string()));
        }
        other => panic!("expected a version mismatch, got {other:?}"),
    }
}

#[test]
fn config_text_round_trips_through_the_checkpoint() {
    let (s, _) = trained_state();
    let loaded = TrainState::from_bytes(&s.to_bytes().unwrap()).unwrap();
    assert_eq!(loaded.model.cfg, s.model.cfg);
    assert_eq!(TrainConfig::from_kv(&s.model.cfg.to_kv()).unwrap(), s.model.cfg);
}
