//! Two-task sequential training with attribution of the second task's effect
//! on the first task's loss.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    begin_tracking, finalize, record_step, AttributionReport, EvalSet, PathIntegralConfig,
};
use crate::data::{ScenarioSpec, Task, TaskSequence};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelConfig};
use crate::optim::{adam_step, AdamParams, AdamState};

/// Which part of the second task's trajectory is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingWindow {
    /// Every optimizer step of the second task.
    Full,
    /// Only the first epoch; training still continues to the end, untracked.
    FirstEpoch,
}

impl fmt::Display for TrackingWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrackingWindow::Full => "full",
            TrackingWindow::FirstEpoch => "first-epoch",
        })
    }
}

impl FromStr for TrackingWindow {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(TrackingWindow::Full),
            "first-epoch" => Ok(TrackingWindow::FirstEpoch),
            other => Err(format!(
                "unknown tracking window {other:?}; expected full or first-epoch"
            )),
        }
    }
}

/// Per-task training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub window: TrackingWindow,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            adam: AdamParams::default(),
            window: TrackingWindow::Full,
        }
    }
}

/// Everything one tracked two-task run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub train: TrainConfig,
    /// Names of the two tasks, first-trained first.
    pub task_names: Vec<String>,
    pub attribution: AttributionReport,
}

/// Stable sub-seed derivation (splitmix64), so the model init and each task's
/// shuffle/dropout stream are independent functions of the run seed.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shuffled per-epoch batch index lists.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Train `model` on one task with Adam, no tracking. The optimizer state is
/// fresh; `rng` drives both the example shuffle and dropout.
pub fn train_task(
    model: &mut Model,
    task: &Task,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    check_train_config(config)?;
    let mut adam = AdamState::new(model, config.adam);
    for _ in 0..config.epochs {
        for batch_indices in epoch_batches(task.train.len(), config.batch_size, rng) {
            let batch = task.train.batch(&batch_indices)?;
            let pass = model.forward_loss(&batch, Mode::Train, task.head, rng)?;
            let grads = pass.into_gradients()?;
            adam_step(&mut adam, model, &grads)?;
        }
    }
    Ok(())
}

fn check_train_config(config: &TrainConfig) -> Result<()> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Usage(
            "training needs at least 1 epoch and a positive batch size".into(),
        ));
    }
    Ok(())
}

/// Train a fresh model through a two-task sequence, attributing the change in
/// the first task's evaluation loss to individual parameters while the second
/// task trains.
///
/// Returns the trained model and the attribution report. Everything is a
/// deterministic function of `(sequence, train, path, seed)`.
pub fn run_with_attribution(
    sequence: &TaskSequence,
    train: &TrainConfig,
    path: &PathIntegralConfig,
    seed: u64,
) -> Result<(Model, RunReport)> {
    check_train_config(train)?;
    let [task_a, task_b]: &[Task; 2] =
        sequence.tasks.as_slice().try_into().map_err(|_| {
            Error::Usage(format!(
                "attribution runs need exactly 2 tasks, sequence has {}",
                sequence.tasks.len()
            ))
        })?;
    if task_a.train.is_empty() || task_b.train.is_empty() {
        return Err(Error::Usage("both tasks need training examples".into()));
    }

    let config = ModelConfig {
        head_count: sequence.head_count,
    };
    let mut model = Model::build(config, derive_seed(seed, 0))?;

    let mut rng_a = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    train_task(&mut model, task_a, train, &mut rng_a)?;

    let eval = EvalSet::draw(&task_a.test, path.eval_set_size, path.eval_set_seed)?;
    let mut ledger = Some(begin_tracking(&mut model, &eval, task_a.head, *path)?);
    let mut report = None;

    let mut rng_b = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut adam = AdamState::new(&model, train.adam);
    for epoch in 0..train.epochs {
        for batch_indices in epoch_batches(task_b.train.len(), train.batch_size, &mut rng_b) {
            let batch = task_b.train.batch(&batch_indices)?;
            let pass = model.forward_loss(&batch, Mode::Train, task_b.head, &mut rng_b)?;
            let grads = pass.into_gradients()?;
            let before = model.snapshot();
            let delta = adam_step(&mut adam, &mut model, &grads)?;
            if let Some(l) = ledger.as_mut() {
                record_step(l, &mut model, &eval, &before, &delta)?;
            }
        }
        if train.window == TrackingWindow::FirstEpoch && epoch == 0 {
            let l = ledger.take().expect("first-epoch ledger still open");
            report = Some(finalize(l, &mut model, &eval)?);
        }
    }
    if let Some(l) = ledger.take() {
        report = Some(finalize(l, &mut model, &eval)?);
    }
    let attribution = report.expect("a ledger was finalized on every path");

    let run = RunReport {
        scenario: sequence.spec.clone(),
        seed,
        train: *train,
        task_names: vec![task_a.name.clone(), task_b.name.clone()],
        attribution,
    };
    Ok((model, run))
}
