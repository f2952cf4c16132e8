//! Single-core timings for the paths that dominate an experiment: the dense
//! and convolution kernels, one full optimizer step, and the per-step cost
//! of attribution tracking (which is one reference-gradient evaluation per
//! quadrature node).

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lethe_core::attribution::{begin_tracking, eval_gradients, record_step, EvalSet, PathIntegralConfig};
use lethe_core::model::{Batch, Mode, Model, ModelConfig};
use lethe_core::optim::{adam_step, AdamParams, AdamState};
use lethe_core::{GradientTape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Batch {
    let images: Vec<f64> = (0..n * 28 * 28).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    Batch::new(Tensor::new([n, 28, 28, 1], images).unwrap(), labels).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// The first dense layer's matrix product, the largest single kernel.
fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&mut rng, &[128, 1568]);
    let w = random_tensor(&mut rng, &[1568, 64]);
    c.bench_function("matmul 128x1568 * 1568x64", |b| {
        b.iter_batched(
            || (x.clone(), w.clone()),
            |(x, w)| {
                let mut tape = GradientTape::new();
                let x = tape.constant(x);
                let w = tape.leaf(w);
                tape.matmul(x, w).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

/// First convolution, forward and backward, at the training batch size.
fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[128, 28, 28, 1]);
    let w = random_tensor(&mut rng, &[3, 3, 1, 32]);
    let bias = random_tensor(&mut rng, &[32]);
    c.bench_function("conv2d fwd+bwd batch 128", |b| {
        b.iter_batched(
            || (x.clone(), w.clone(), bias.clone()),
            |(x, w, bias)| {
                let mut tape = GradientTape::new();
                let x = tape.constant(x);
                let w = tape.leaf(w);
                let bias = tape.leaf(bias);
                let y = tape.conv2d(x, w, bias, 2).unwrap();
                let loss = tape.sum(y);
                tape.backward(loss).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

/// One full training step: forward with dropout, backward, Adam update.
fn bench_train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = Model::build(ModelConfig { head_count: 1 }, 0).unwrap();
    let mut adam = AdamState::new(&model, AdamParams::default());
    let batch = random_batch(&mut rng, 128);
    c.bench_function("train step batch 128", |b| {
        b.iter(|| {
            let pass = model.forward_loss(&batch, Mode::Train, 0, &mut rng).unwrap();
            let grads = pass.into_gradients().unwrap();
            adam_step(&mut adam, &mut model, &grads).unwrap()
        })
    });
}

/// The reference-task gradient over a 256-example evaluation set — the cost
/// of one quadrature node, paid once per tracked optimizer step.
fn bench_eval_gradients(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::build(ModelConfig { head_count: 1 }, 0).unwrap();
    let eval = EvalSet::from_batch(random_batch(&mut rng, 256));
    c.bench_function("eval gradients 256", |b| {
        b.iter(|| eval_gradients(&model, &eval, 0).unwrap())
    });
}

/// Recording one optimizer step into a fresh ledger (trapezoid, one
/// sub-interval): the end-to-end per-step overhead of attribution.
fn bench_record_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eval = EvalSet::from_batch(random_batch(&mut rng, 256));
    let batch = random_batch(&mut rng, 128);
    let model = Model::build(ModelConfig { head_count: 1 }, 0).unwrap();
    c.bench_function("record_step trapezoid eval 256", |b| {
        b.iter_batched(
            || {
                let mut model = model.clone();
                let ledger =
                    begin_tracking(&mut model, &eval, 0, PathIntegralConfig::default()).unwrap();
                let before = model.snapshot();
                let mut adam = AdamState::new(&model, AdamParams::default());
                let mut step_rng = ChaCha8Rng::seed_from_u64(5);
                let pass = model.forward_loss(&batch, Mode::Train, 0, &mut step_rng).unwrap();
                let grads = pass.into_gradients().unwrap();
                let delta = adam_step(&mut adam, &mut model, &grads).unwrap();
                (ledger, model, before, delta)
            },
            |(mut ledger, mut model, before, delta)| {
                record_step(&mut ledger, &mut model, &eval, &before, &delta).unwrap()
            },
            BatchSize::PerIteration,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_matmul, bench_conv2d, bench_train_step, bench_eval_gradients,
        bench_record_step
}
criterion_main!(benches);
