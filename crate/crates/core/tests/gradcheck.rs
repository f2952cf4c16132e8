//! Central finite-difference oracle for the analytic gradients of the full
//! model: forward/backward must agree with (L(θ+h) − L(θ−h)) / 2h on sampled
//! coordinates across every block kind.
//!
//! Relu makes the loss piecewise-smooth: when a perturbation of ±h pushes
//! some pre-activation across zero, the central difference estimates a
//! *secant across the kink*, not the one-sided derivative backprop computes,
//! and no correct gradient can match it. Such straddles are identifiable
//! without consulting the analytic value: the FD estimate itself moves by
//! far more than the O(h²) smoothness budget when h shrinks. A coordinate
//! that fails at h=1e-5 is therefore re-checked at h=1e-6; it passes only if
//! the refined estimate agrees with backprop AND disagrees with the coarse
//! estimate (proving the coarse estimate was the artifact).

use lethe_core::model::{Batch, Mode, Model, ModelConfig};
use lethe_core::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Batch {
    let images: Vec<f64> = (0..n * 28 * 28).map(|_| rng.random()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    Batch::new(Tensor::new(vec![n, 28, 28, 1], images).unwrap(), labels).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of the eval-mode loss along one coordinate.
fn central_diff(model: &mut Model, batch: &Batch, head: usize, b: usize, j: usize, h: f64) -> f64 {
    let orig = model.block(b).values.data()[j];
    model.block_values_mut(b)[j] = orig + h;
    let lp = model.loss(batch, head).unwrap();
    model.block_values_mut(b)[j] = orig - h;
    let lm = model.loss(batch, head).unwrap();
    model.block_values_mut(b)[j] = orig;
    (lp - lm) / (2.0 * h)
}

/// Check one coordinate, with kink-straddle refinement. Returns whether the
/// coarse (h=1e-5) check needed refinement.
fn check_coord(
    model: &mut Model,
    batch: &Batch,
    head: usize,
    analytic: f64,
    b: usize,
    j: usize,
) -> bool {
    let fd = central_diff(model, batch, head, b, j, FD_H);
    if rel_err(analytic, fd) <= TOL {
        return false;
    }
    let fine = central_diff(model, batch, head, b, j, FD_H / 10.0);
    assert!(
        rel_err(analytic, fine) <= TOL,
        "block {b} ({}) coord {j}: analytic {analytic} vs fd {fd} (h={FD_H}) and {fine} \
         (h={:e}); mismatch persists under refinement, so this is not a kink artifact",
        model.block(b).name,
        FD_H / 10.0,
    );
    assert!(
        rel_err(fine, fd) > TOL,
        "block {b} coord {j}: refined fd {fine} agrees with coarse fd {fd}, \
         yet analytic {analytic} matched neither consistently"
    );
    true
}

/// Compare sampled coordinates of the analytic gradient against central
/// differences of the eval-mode loss.
fn check_eval_gradients(seed: u64, head_count: usize, head: usize, coords: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(ModelConfig { head_count }, seed).unwrap();
    let batch = random_batch(&mut rng, 8);
    let (_, grads) = model.gradients(&batch, head).unwrap();

    let n_blocks = model.blocks().len();
    let mut refined = 0usize;
    for _ in 0..coords {
        let b = rng.random_range(0..n_blocks);
        let len = model.block(b).values.data().len();
        let j = rng.random_range(0..len);
        let analytic = grads.block(b).data()[j];
        refined += usize::from(check_coord(&mut model, &batch, head, analytic, b, j));
    }
    // Kink straddles are rare; a refinement rate beyond a few percent would
    // mean the escape hatch is doing the test's job.
    assert!(refined * 20 <= coords, "{refined} of {coords} coordinates straddled kinks");
    eprintln!("seed {seed} head {head}: {coords} coordinates, {refined} kink-refined");
}

#[test]
fn gradients_match_finite_differences() {
    for seed in [1, 2] {
        check_eval_gradients(seed, 1, 0, 200);
    }
}

#[test]
fn gradients_match_on_a_second_head() {
    check_eval_gradients(3, 2, 1, 150);
}

#[test]
fn train_mode_gradients_match_under_a_fixed_dropout_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::build(ModelConfig::default(), 5).unwrap();
    let batch = random_batch(&mut rng, 4);

    // Reseeding before every forward pass freezes the dropout masks, which
    // makes the train-mode loss a differentiable function of θ.
    let mask_seed = 99u64;
    let pass = model
        .forward_loss(&batch, Mode::Train, 0, &mut ChaCha8Rng::seed_from_u64(mask_seed))
        .unwrap();
    let grads = pass.into_gradients().unwrap();

    let train_loss = |model: &mut Model| {
        model
            .forward_loss(&batch, Mode::Train, 0, &mut ChaCha8Rng::seed_from_u64(mask_seed))
            .unwrap()
            .loss()
    };
    let n_blocks = model.blocks().len();
    for _ in 0..60 {
        let b = rng.random_range(0..n_blocks);
        let len = model.block(b).values.data().len();
        let j = rng.random_range(0..len);
        let analytic = grads.block(b).data()[j];

        let orig = model.block(b).values.data()[j];
        model.block_values_mut(b)[j] = orig + FD_H;
        let lp = train_loss(&mut model);
        model.block_values_mut(b)[j] = orig - FD_H;
        let lm = train_loss(&mut model);
        model.block_values_mut(b)[j] = orig;

        let fd = (lp - lm) / (2.0 * FD_H);
        // A kink straddle here would need the same refinement as above; the
        // sampled coordinates at this seed stay clear of kinks.
        let e = rel_err(analytic, fd);
        assert!(e <= TOL, "block {b} coord {j}: {analytic} vs {fd} (rel {e})");
    }
}
