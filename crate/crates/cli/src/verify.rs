//! `lethe verify` — self-checks of the numerical core, runnable in the field
//! without any dataset: gradients against finite differences, the quadrature
//! against a closed-form integral, and its convergence on the real model.

use std::process::ExitCode;

use anyhow::{ensure, Result};
use lethe_core::attribution::{
    begin_tracking, eval_gradients, eval_loss, finalize, record_step, AttributionLedger,
    BlockInfo, EvalSet, LossField, PathIntegralConfig,
};
use lethe_core::model::{Batch, Model, ModelConfig, ParamKind};
use lethe_core::optim::sgd_step;
use lethe_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::VerifyArgs;

pub fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    // No flags selects everything.
    let all = !(args.gradients || args.quadratic_oracle || args.quadrature_convergence);
    let mut ok = true;
    if all || args.gradients {
        ok &= run_check("gradients", check_gradients);
    }
    if all || args.quadratic_oracle {
        ok &= run_check("quadratic-oracle", check_quadratic_oracle);
    }
    if all || args.quadrature_convergence {
        ok &= run_check("quadrature-convergence", check_quadrature_convergence);
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run_check(name: &str, check: impl FnOnce() -> Result<String>) -> bool {
    match check() {
        Ok(detail) => {
            println!("check {name}: ok ({detail})");
            true
        }
        Err(e) => {
            println!("check {name}: FAILED ({e:#})");
            false
        }
    }
}

/// Random images in [0, 1) with random labels; enough to probe every code
/// path of the network without touching a dataset.
fn synthetic_batch(rng: &mut ChaCha8Rng, n: usize) -> Result<Batch> {
    let pixels: Vec<f64> = (0..n * 28 * 28).map(|_| rng.random::<f64>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
    Ok(Batch::new(Tensor::new([n, 28, 28, 1], pixels)?, labels)?)
}

// ---- gradients vs. central finite differences --------------------------

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Coordinates with gradient and difference both below this are compared
/// absolutely, not relatively.
const FD_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

fn central_diff(model: &mut Model, eval: &EvalSet, b: usize, j: usize, h: f64) -> Result<f64> {
    let orig = model.block(b).values.data()[j];
    model.block_values_mut(b)[j] = orig + h;
    let plus = eval_loss(model, eval, 0)?;
    model.block_values_mut(b)[j] = orig - h;
    let minus = eval_loss(model, eval, 0)?;
    model.block_values_mut(b)[j] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Map a flat coordinate index to (block, offset within block).
fn locate(model: &Model, flat: usize) -> (usize, usize) {
    let mut rem = flat;
    for (i, b) in model.blocks().iter().enumerate() {
        let n = b.values.len();
        if rem < n {
            return (i, rem);
        }
        rem -= n;
    }
    unreachable!("flat index within param_count");
}

/// Central differences at a fixed step are biased wherever the step straddles
/// a ReLU kink, so a failing coordinate is retried at h/10: a genuine gradient
/// bug reproduces at the finer step, while a kink artifact vanishes (and the
/// two difference estimates disagree with each other, confirming the step
/// size — not the analytic value — was the problem).
fn check_gradients() -> Result<String> {
    const COORDS_PER_SEED: usize = 100;
    let mut checked = 0usize;
    let mut refined = 0usize;
    let mut max_rel = 0.0f64;
    for seed in [11u64, 17] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut model = Model::build(ModelConfig { head_count: 1 }, seed)?;
        let eval = EvalSet::from_batch(synthetic_batch(&mut rng, 8)?);
        let (_, grads) = eval_gradients(&model, &eval, 0)?;
        let total = model.param_count();
        for k in 0..COORDS_PER_SEED {
            // Evenly spaced flat indices cover every block.
            let (b, j) = locate(&model, k * total / COORDS_PER_SEED);
            let analytic = grads.block(b).data()[j];
            let coarse = central_diff(&mut model, &eval, b, j, FD_H)?;
            checked += 1;
            let err = rel_err(analytic, coarse);
            if err <= FD_TOL {
                max_rel = max_rel.max(err);
                continue;
            }
            let fine = central_diff(&mut model, &eval, b, j, FD_H / 10.0)?;
            ensure!(
                rel_err(analytic, fine) <= FD_TOL && rel_err(fine, coarse) > FD_TOL,
                "seed {seed} block {} coord {j}: analytic {analytic:.6e} vs fd {coarse:.6e} \
                 (rel {err:.2e}); persists at h={:.0e}",
                model.block(b).name,
                FD_H / 10.0
            );
            refined += 1;
        }
    }
    ensure!(
        refined * 20 <= checked,
        "{refined} of {checked} coordinates needed step refinement; expected isolated kinks"
    );
    Ok(format!(
        "{checked} coordinates, 2 seeds, max rel err {max_rel:.1e}, {refined} kink-refined"
    ))
}

// ---- trapezoid exactness on a quadratic field --------------------------

/// L(θ) = ½ Σ aᵢθᵢ², whose gradient aᵢθᵢ is linear in θ — the trapezoid rule
/// integrates it exactly along any straight segment, so attribution totals
/// must match the closed form to rounding error.
struct QuadraticField {
    a: Vec<f64>,
}

impl LossField for QuadraticField {
    fn loss(&mut self, params: &[Tensor]) -> lethe_core::error::Result<f64> {
        Ok(params[0]
            .data()
            .iter()
            .zip(&self.a)
            .map(|(t, a)| 0.5 * a * t * t)
            .sum())
    }

    fn loss_and_grad(&mut self, params: &[Tensor]) -> lethe_core::error::Result<(f64, Vec<Tensor>)> {
        let grad: Vec<f64> = params[0].data().iter().zip(&self.a).map(|(t, a)| a * t).collect();
        let loss = self.loss(params)?;
        Ok((loss, vec![Tensor::new(params[0].shape().to_vec(), grad)?]))
    }
}

fn check_quadratic_oracle() -> Result<String> {
    const DIM: usize = 32;
    const STEPS: usize = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut field = QuadraticField {
        a: (0..DIM).map(|_| rng.random_range(0.5..2.5)).collect(),
    };
    let start: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut theta = Tensor::new([DIM], start.clone())?;
    let info = vec![BlockInfo {
        name: "theta".into(),
        kind: ParamKind::Weight,
        head: None,
    }];
    let mut ledger = AttributionLedger::begin(
        &mut field,
        info,
        vec![theta.clone()],
        PathIntegralConfig::default(), // trapezoid, one sub-interval
    )?;
    for _ in 0..STEPS {
        let delta = Tensor::new([DIM], (0..DIM).map(|_| rng.random_range(-0.1..0.1)).collect())?;
        ledger.record_step(&mut field, &[theta.clone()], &[delta.clone()])?;
        // Same arithmetic as the ledger's own endpoint update, so the
        // trajectory-continuity check keeps accepting our copy of θ.
        for (t, d) in theta.data_mut().iter_mut().zip(delta.data()) {
            *t += d;
        }
    }
    let report = ledger.finalize(&mut field)?;
    ensure!(
        report.relative_error <= 1e-12,
        "total attributed change off by rel {:.2e} (> 1e-12)",
        report.relative_error
    );
    let mut max_coord = 0.0f64;
    for (i, v) in report.blocks[0].values.iter().enumerate() {
        let exact = 0.5 * field.a[i] * (theta.data()[i].powi(2) - start[i].powi(2));
        max_coord = max_coord.max((v - exact).abs());
    }
    ensure!(
        max_coord <= 1e-10,
        "worst per-coordinate error {max_coord:.2e} (> 1e-10)"
    );
    Ok(format!(
        "{STEPS} steps, dim {DIM}, total rel err {:.1e}, max coordinate err {max_coord:.1e}",
        report.relative_error
    ))
}

// ---- quadrature convergence on the real model --------------------------

/// Replay one fixed SGD trajectory under 1, 2, and 4 sub-intervals per step;
/// the reconciliation error against the exactly measured loss change must
/// fall, and roughly halve or better from 2 to 4 (the trapezoid rule is
/// second-order, so halving the sub-interval should cut the error ~4x).
fn check_quadrature_convergence() -> Result<String> {
    const STEPS: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = synthetic_batch(&mut rng, 64)?;
    let eval = EvalSet::from_batch(batch.clone());
    let mut model = Model::build(ModelConfig { head_count: 1 }, 5)?;
    let start = model.snapshot();

    // Record the trajectory once: full-batch SGD on the evaluation batch
    // itself, so the tracked loss moves far enough to measure against.
    let mut trajectory = Vec::with_capacity(STEPS);
    for _ in 0..STEPS {
        let before = model.snapshot();
        let (_, grads) = model.gradients(&batch, 0)?;
        let delta = sgd_step(&mut model, &grads, 0.05)?;
        trajectory.push((before, delta, model.snapshot()));
    }

    let mut errs = Vec::new();
    for substeps in [1usize, 2, 4] {
        model.restore(&start);
        let config = PathIntegralConfig {
            substeps,
            ..PathIntegralConfig::default()
        };
        let mut ledger = begin_tracking(&mut model, &eval, 0, config)?;
        for (before, delta, after) in &trajectory {
            model.restore(after);
            record_step(&mut ledger, &mut model, &eval, before, delta)?;
        }
        let report = finalize(ledger, &mut model, &eval)?;
        errs.push(report.relative_error);
    }

    let (e1, e2, e4) = (errs[0], errs[1], errs[2]);
    ensure!(
        e2 < e1 && e4 < e2,
        "error not decreasing: {e1:.3e} -> {e2:.3e} -> {e4:.3e} for substeps 1/2/4"
    );
    if e2 > 1e-9 {
        ensure!(
            e4 <= 0.5 * e2,
            "substeps 2 -> 4 only improved {e2:.3e} -> {e4:.3e}; expected at least halving"
        );
    }
    Ok(format!(
        "{STEPS} steps, rel err {e1:.2e} -> {e2:.2e} -> {e4:.2e} for substeps 1/2/4"
    ))
}
