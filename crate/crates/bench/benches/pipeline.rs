use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use coco_bench::{dataset, small_config, state_and_batch};
use coco_core::corpus::EvalSplit;
use coco_core::evalkit::{evaluate, EvalOptions};
use coco_core::gradsuite::run_gradsuite;
use coco_core::trainer::{train_step, Decisions, TrainState, Variant};

fn train_steps(c: &mut Criterion) {
    let d = dataset(300, 120);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for v in [Variant::BackboneOnly, Variant::Soft, Variant::Full] {
        let (s, b) = state_and_batch(v, &d);
        let bytes = s.to_bytes().unwrap();
        group.bench_function(v.to_string(), |bench| {
            bench.iter_batched(
                || TrainState::from_bytes(&bytes).unwrap(),
                |mut s| train_step(&mut s, &b).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let d = dataset(300, 120);
    let (s, b) = state_and_batch(Variant::Full, &d);
    c.bench_function("gradients/full", |bench| bench.iter(|| s.gradients(&b, &Decisions::default()).unwrap()));
}

fn evaluation(c: &mut Criterion) {
    let d = dataset(300, 120);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for v in [Variant::BackboneOnly, Variant::Full] {
        let s = TrainState::new(&small_config(v), &d).unwrap();
        let opts = EvalOptions::new(&[5, 10]);
        group.bench_function(v.to_string(), |bench| bench.iter(|| evaluate(&s.model, &d, EvalSplit::Test, &opts).unwrap()));
    }
    group.finish();
}

fn gradcheck(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    for scope in ["l_r", "l_ortho", "decouple"] {
        group.bench_function(scope, |bench| bench.iter(|| run_gradsuite(scope).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, train_steps, forward_backward, evaluation, gradcheck);
criterion_main!(benches);
