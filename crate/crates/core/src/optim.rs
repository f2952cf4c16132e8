//! Optimizers that report exactly what they did to the parameters.
//!
//! Every step returns a [`StepDelta`]: the per-block change applied to the
//! model, with `theta_after = theta_before + delta` holding bit-exactly
//! (the update is literally `theta += delta`). Attribution integrates the
//! old-task gradient field along these recorded segments, so the delta is the
//! authoritative trajectory record, not a reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockGrads, Model};
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

/// First/second moment estimates for every block of one model.
#[derive(Debug, Clone)]
pub struct AdamState {
    params: AdamParams,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &Model, params: AdamParams) -> Self {
        let zeros = || {
            model
                .blocks()
                .iter()
                .map(|b| Tensor::zeros(b.values.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        AdamState {
            params,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn params(&self) -> AdamParams {
        self.params
    }

    /// Number of steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// The exact parameter change of one optimizer step, per block.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDelta {
    deltas: Vec<Tensor>,
}

impl StepDelta {
    pub fn block(&self, i: usize) -> &Tensor {
        &self.deltas[i]
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Replays this step onto a parameter set: `theta += delta`, elementwise,
    /// in block order — the same arithmetic the optimizer performed.
    pub fn add_into(&self, blocks: &mut [Tensor]) {
        assert_eq!(blocks.len(), self.deltas.len());
        for (b, d) in blocks.iter_mut().zip(&self.deltas) {
            assert_eq!(b.shape(), d.shape());
            for (x, dx) in b.data_mut().iter_mut().zip(d.data()) {
                *x += dx;
            }
        }
    }
}

fn check_alignment(model: &Model, grads: &BlockGrads, op: &'static str) -> Result<()> {
    if grads.len() != model.blocks().len() {
        return Err(Error::Usage(format!(
            "{op}: gradients cover {} blocks, model has {}",
            grads.len(),
            model.blocks().len()
        )));
    }
    for (b, g) in model.blocks().iter().zip(grads.blocks()) {
        if b.values.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: b.values.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// One Adam step with bias correction:
///
/// ```text
/// m <- b1 m + (1-b1) g        m_hat = m / (1 - b1^t)
/// v <- b2 v + (1-b2) g^2      v_hat = v / (1 - b2^t)
/// delta = -lr * m_hat / (sqrt(v_hat) + eps)
/// ```
pub fn adam_step(state: &mut AdamState, model: &mut Model, grads: &BlockGrads) -> Result<StepDelta> {
    check_alignment(model, grads, "adam_step")?;
    state.t += 1;
    let p = state.params;
    let mc = 1.0 - p.beta1.powi(state.t as i32);
    let vc = 1.0 - p.beta2.powi(state.t as i32);
    let mut deltas = Vec::with_capacity(grads.len());
    for i in 0..grads.len() {
        let g = grads.block(i).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let mut delta = Tensor::zeros(grads.block(i).shape().to_vec());
        for (((dv, &gv), mv), vv) in delta.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = p.beta1 * *mv + (1.0 - p.beta1) * gv;
            *vv = p.beta2 * *vv + (1.0 - p.beta2) * gv * gv;
            let m_hat = *mv / mc;
            let v_hat = *vv / vc;
            *dv = -p.lr * m_hat / (v_hat.sqrt() + p.epsilon);
        }
        deltas.push(delta);
    }
    let step = StepDelta { deltas };
    apply(model, &step);
    Ok(step)
}

/// Plain gradient descent: `delta = -lr * g`.
pub fn sgd_step(model: &mut Model, grads: &BlockGrads, lr: f64) -> Result<StepDelta> {
    check_alignment(model, grads, "sgd_step")?;
    let deltas = grads
        .blocks()
        .iter()
        .map(|g| {
            let data = g.data().iter().map(|&gv| -lr * gv).collect();
            Tensor::new(g.shape().to_vec(), data).expect("delta shape")
        })
        .collect();
    let step = StepDelta { deltas };
    apply(model, &step);
    Ok(step)
}

fn apply(model: &mut Model, step: &StepDelta) {
    for (i, delta) in step.deltas.iter().enumerate() {
        for (x, dx) in model.block_values_mut(i).iter_mut().zip(delta.data()) {
            *x += dx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn fresh() -> (Model, AdamState) {
        let model = Model::build(ModelConfig::default(), 0).unwrap();
        let state = AdamState::new(&model, AdamParams::default());
        (model, state)
    }

    /// Gradients that are zero everywhere except one coordinate of one block.
    fn point_grads(model: &Model, block: usize, coord: usize, g: f64) -> BlockGrads {
        let mut grads = BlockGrads::zeros_like(model);
        grads.blocks_mut()[block].data_mut()[coord] = g;
        grads
    }

    #[test]
    fn first_step_moves_by_about_lr_against_the_gradient() {
        let (mut model, mut state) = fresh();
        let before = model.block(0).values.data()[5];
        let grads = point_grads(&model, 0, 5, 0.3);
        let step = adam_step(&mut state, &mut model, &grads).unwrap();
        let delta = step.block(0).data()[5];
        // First step: m_hat = g, v_hat = g^2, so delta ~ -lr * sign(g).
        assert!((delta + 0.001).abs() < 1e-6, "delta {delta}");
        assert_eq!(model.block(0).values.data()[5], before + delta);
    }

    #[test]
    fn zero_gradient_produces_exactly_zero_delta() {
        let (mut model, mut state) = fresh();
        let before = model.snapshot();
        let grads = BlockGrads::zeros_like(&model);
        let step = adam_step(&mut state, &mut model, &grads).unwrap();
        assert!(step.blocks().iter().all(|d| d.data().iter().all(|&v| v == 0.0)));
        assert_eq!(model.snapshot(), before);
    }

    #[test]
    fn untouched_coordinates_never_move() {
        let (mut model, mut state) = fresh();
        let before = model.snapshot();
        let grads = point_grads(&model, 0, 5, 0.3);
        for _ in 0..3 {
            adam_step(&mut state, &mut model, &grads).unwrap();
        }
        for (i, (b, s)) in model.blocks().iter().zip(before.blocks()).enumerate() {
            for (j, (x, y)) in b.values.data().iter().zip(s.data()).enumerate() {
                if (i, j) != (0, 5) {
                    assert_eq!(x, y, "block {i} coord {j} moved");
                }
            }
        }
    }

    #[test]
    fn five_steps_match_a_hand_rolled_recurrence() {
        // Loss 0.5 * theta^2 on a single coordinate, so g = theta.
        let (mut model, mut state) = fresh();
        model.set_block_values(8, &{
            let mut v = vec![0.0; model.block(8).values.len()];
            v[0] = 1.0;
            v
        });

        // Independent oracle for the same recurrence.
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let p = AdamParams::default();
        for t in 1..=5u32 {
            let g = theta;
            m = p.beta1 * m + (1.0 - p.beta1) * g;
            v = p.beta2 * v + (1.0 - p.beta2) * g * g;
            let m_hat = m / (1.0 - p.beta1.powi(t as i32));
            let v_hat = v / (1.0 - p.beta2.powi(t as i32));
            theta -= p.lr * m_hat / (v_hat.sqrt() + p.epsilon);

            let g_model = model.block(8).values.data()[0];
            let grads = point_grads(&model, 8, 0, g_model);
            adam_step(&mut state, &mut model, &grads).unwrap();
            let got = model.block(8).values.data()[0];
            assert!((got - theta).abs() <= 1e-12, "step {t}: {got} vs {theta}");
        }
    }

    #[test]
    fn replaying_deltas_reconstructs_final_parameters_bit_exactly() {
        use rand::{Rng, SeedableRng};
        let (mut model, mut state) = fresh();
        let start = model.snapshot();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut steps = Vec::new();
        for _ in 0..10 {
            let mut grads = BlockGrads::zeros_like(&model);
            for g in grads.blocks_mut() {
                for v in g.data_mut() {
                    *v = rng.random::<f64>() - 0.5;
                }
            }
            steps.push(adam_step(&mut state, &mut model, &grads).unwrap());
        }
        let mut replay: Vec<Tensor> = start.blocks().to_vec();
        for step in &steps {
            step.add_into(&mut replay);
        }
        for (i, (rebuilt, actual)) in replay.iter().zip(model.blocks()).enumerate() {
            for (x, y) in rebuilt.data().iter().zip(actual.values.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "block {i} drifted");
            }
        }
    }

    #[test]
    fn step_size_respects_the_bias_corrected_bound() {
        use rand::{Rng, SeedableRng};
        // Cauchy-Schwarz bound for bias-corrected Adam:
        // |delta| <= lr * sqrt((1-b1)(1-b2^t) / ((1-b2)(1-b1^t)))
        let (mut model, mut state) = fresh();
        let p = AdamParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for t in 1..=20u64 {
            let mut grads = BlockGrads::zeros_like(&model);
            for g in grads.blocks_mut() {
                for v in g.data_mut() {
                    *v = (rng.random::<f64>() - 0.5) * 10.0;
                }
            }
            let step = adam_step(&mut state, &mut model, &grads).unwrap();
            let bound = p.lr
                * ((1.0 - p.beta1) * (1.0 - p.beta2.powi(t as i32))
                    / ((1.0 - p.beta2) * (1.0 - p.beta1.powi(t as i32))))
                .sqrt()
                * (1.0 + 1e-12);
            let max = step
                .blocks()
                .iter()
                .flat_map(|d| d.data())
                .fold(0.0f64, |acc, &v| acc.max(v.abs()));
            assert!(max <= bound, "step {t}: max |delta| {max} > bound {bound}");
        }
    }

    #[test]
    fn sgd_delta_is_minus_lr_times_gradient() {
        let (mut model, _) = fresh();
        let before = model.block(0).values.data()[3];
        let grads = point_grads(&model, 0, 3, 2.0);
        let step = sgd_step(&mut model, &grads, 0.05).unwrap();
        assert_eq!(step.block(0).data()[3], -0.1);
        assert_eq!(model.block(0).values.data()[3], before - 0.1);
        assert!(step.block(1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_contracts_a_quadratic_bowl_geometrically() {
        // g = theta means theta_n = (1 - lr)^n theta_0.
        let (mut model, _) = fresh();
        let mut v = vec![0.0; model.block(8).values.len()];
        v[0] = 1.0;
        model.set_block_values(8, &v);
        for _ in 0..100 {
            let g = model.block(8).values.data()[0];
            let grads = point_grads(&model, 8, 0, g);
            sgd_step(&mut model, &grads, 0.1).unwrap();
        }
        let theta = model.block(8).values.data()[0];
        let oracle = 0.9f64.powi(100);
        assert!(theta.abs() < 1e-4, "theta {theta}");
        assert!((theta - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{theta} vs {oracle}");
    }

    #[test]
    fn rejects_misaligned_gradients() {
        let (mut model, mut state) = fresh();
        let other = Model::build(ModelConfig { head_count: 2 }, 0).unwrap();
        let grads = BlockGrads::zeros_like(&other);
        assert!(adam_step(&mut state, &mut model, &grads).is_err());
    }
}
