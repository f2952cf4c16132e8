//! Per-parameter attribution of loss change via a path integral along the
//! training trajectory.
//!
//! While a model trains on a new task, each optimizer step moves the
//! parameters by some Δθ. The change this inflicts on a *reference* loss
//! (typically the previous task's evaluation loss) decomposes exactly as a
//! line integral of that loss's gradient field along the trajectory, and the
//! integral splits coordinate-wise into one additive contribution per
//! parameter. [`AttributionLedger`] accumulates a quadrature approximation of
//! those contributions, step by step, and reconciles the accumulated total
//! against the directly measured loss change at the end.

mod pipeline;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Batch, BlockGrads, Model, ParamKind, ParamSnapshot};
use crate::optim::StepDelta;
use crate::tensor::Tensor;

pub use pipeline::{run_with_attribution, train_task, RunReport, TrackingWindow, TrainConfig};

/// Evaluation batches are cut to this many examples per forward pass; larger
/// slabs fall out of cache and evaluate measurably slower per example.
const EVAL_CHUNK: usize = 128;

/// Relative-error denominators are floored here so that a reference loss
/// change of exactly zero still yields a finite error.
const REL_ERR_FLOOR: f64 = 1e-8;

/// Quadrature rule for the per-step line integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    /// Gradient at the step start only. First-order; cheap and biased.
    LeftRiemann,
    /// Gradients at both endpoints (and interior nodes for `substeps` > 1).
    /// Exact on gradient fields that are linear in θ.
    Trapezoid,
}

impl fmt::Display for Quadrature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quadrature::LeftRiemann => "left",
            Quadrature::Trapezoid => "trapezoid",
        })
    }
}

impl FromStr for Quadrature {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "left" => Ok(Quadrature::LeftRiemann),
            "trapezoid" => Ok(Quadrature::Trapezoid),
            other => Err(format!("unknown quadrature {other:?}; expected left or trapezoid")),
        }
    }
}

/// How the per-step line integrals are discretized and which evaluation set
/// the reference loss is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathIntegralConfig {
    pub quadrature: Quadrature,
    /// Number of sub-intervals per optimizer step (K ≥ 1). Trapezoid
    /// evaluates K+1 nodes per step but reuses the previous step's endpoint,
    /// so the amortized cost is K gradient evaluations either way.
    pub substeps: usize,
    /// Number of reference-task examples the loss is evaluated on.
    pub eval_set_size: usize,
    /// Seed for drawing the evaluation subset.
    pub eval_set_seed: u64,
}

impl Default for PathIntegralConfig {
    fn default() -> Self {
        PathIntegralConfig {
            quadrature: Quadrature::Trapezoid,
            substeps: 1,
            eval_set_size: 1024,
            eval_set_seed: 0,
        }
    }
}

/// Quadrature nodes for one step: positions t ∈ [0, 1] along θ_before + t·Δθ
/// and their weights. Weights sum to 1 for both rules.
fn nodes(config: &PathIntegralConfig) -> Vec<(f64, f64)> {
    let k = config.substeps;
    let kf = k as f64;
    match config.quadrature {
        Quadrature::LeftRiemann => (0..k).map(|j| (j as f64 / kf, 1.0 / kf)).collect(),
        Quadrature::Trapezoid => (0..=k)
            .map(|j| {
                let w = if j == 0 || j == k { 0.5 / kf } else { 1.0 / kf };
                (j as f64 / kf, w)
            })
            .collect(),
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, used to fingerprint evaluation sets. Not cryptographic; it only
/// has to catch accidental substitution or mutation of the set mid-run.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(FNV_OFFSET)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }
}

/// A frozen set of examples the reference loss is evaluated on. The same set,
/// in the same order, must back every evaluation of one ledger; the
/// fingerprint enforces that.
#[derive(Debug, Clone)]
pub struct EvalSet {
    chunks: Vec<Batch>,
    len: usize,
    fingerprint: u64,
}

impl EvalSet {
    /// Draw `size` distinct examples from `ds`, seeded; the whole dataset in
    /// natural order if it has no more than `size` examples.
    pub fn draw(ds: &Dataset, size: usize, seed: u64) -> Result<EvalSet> {
        if size == 0 {
            return Err(Error::InvalidArgument {
                op: "EvalSet::draw",
                reason: "size must be at least 1".into(),
            });
        }
        if ds.is_empty() {
            return Err(Error::InvalidArgument {
                op: "EvalSet::draw",
                reason: "dataset is empty".into(),
            });
        }
        let mut indices: Vec<usize> = (0..ds.len()).collect();
        if size < ds.len() {
            indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            indices.truncate(size);
        }
        let chunks = indices
            .chunks(EVAL_CHUNK)
            .map(|c| ds.batch(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet::from_chunks(chunks))
    }

    /// Wrap an explicit batch, e.g. a synthetic fixture in tests.
    pub fn from_batch(batch: Batch) -> EvalSet {
        let chunks = (0..batch.len())
            .collect::<Vec<_>>()
            .chunks(EVAL_CHUNK)
            .map(|c| {
                let images: Vec<f64> = c
                    .iter()
                    .flat_map(|&i| {
                        let px = crate::data::PIXELS;
                        batch.images().data()[i * px..(i + 1) * px].to_vec()
                    })
                    .collect();
                let labels: Vec<usize> = c.iter().map(|&i| batch.labels()[i]).collect();
                let shape = vec![c.len(), crate::model::IMAGE_SIDE, crate::model::IMAGE_SIDE, 1];
                Batch::new(Tensor::new(shape, images).expect("chunk shape"), labels)
                    .expect("chunk batch")
            })
            .collect();
        EvalSet::from_chunks(chunks)
    }

    fn from_chunks(chunks: Vec<Batch>) -> EvalSet {
        let len = chunks.iter().map(Batch::len).sum();
        let mut h = Fnv::new();
        h.write_u64(len as u64);
        for b in &chunks {
            for &l in b.labels() {
                h.write_u64(l as u64);
            }
            for &p in b.images().data() {
                h.write_u64(p.to_bits());
            }
        }
        EvalSet {
            chunks,
            len,
            fingerprint: h.0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Content hash over labels and pixel bits, order-sensitive.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// A differentiable scalar field over a fixed list of parameter tensors.
///
/// The attribution machinery only ever talks to the reference loss through
/// this trait, so the quadrature can be validated against closed-form fields
/// with exactly known line integrals.
pub trait LossField {
    /// Loss at the given parameter values. Must be deterministic.
    fn loss(&mut self, params: &[Tensor]) -> Result<f64>;

    /// Loss and its gradient at the given parameter values.
    fn loss_and_grad(&mut self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;
}

/// Reference loss of a trained model head on a frozen evaluation set,
/// evaluated in chunks. Parameter vectors are installed into the model before
/// each evaluation; the caller is responsible for restoring the model
/// afterwards.
struct TaskLossField<'a> {
    model: &'a mut Model,
    eval: &'a EvalSet,
    head: usize,
}

impl TaskLossField<'_> {
    fn install(&mut self, params: &[Tensor]) {
        for (i, p) in params.iter().enumerate() {
            self.model.set_block_values(i, p.data());
        }
    }
}

impl LossField for TaskLossField<'_> {
    fn loss(&mut self, params: &[Tensor]) -> Result<f64> {
        self.install(params);
        eval_loss(self.model, self.eval, self.head)
    }

    fn loss_and_grad(&mut self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        self.install(params);
        let (loss, grads) = eval_gradients(self.model, self.eval, self.head)?;
        Ok((loss, grads.into_blocks()))
    }
}

/// Mean evaluation-mode loss of `head` over the whole set. Chunks are
/// combined with the same weighted sum as [`eval_gradients`], so the two
/// report bitwise-identical losses.
pub fn eval_loss(model: &Model, eval: &EvalSet, head: usize) -> Result<f64> {
    let mut total = 0.0;
    for b in &eval.chunks {
        total += model.loss(b, head)? * (b.len() as f64 / eval.len as f64);
    }
    Ok(total)
}

/// Mean evaluation-mode loss and its gradient over the whole set.
pub fn eval_gradients(model: &Model, eval: &EvalSet, head: usize) -> Result<(f64, BlockGrads)> {
    let mut loss = 0.0;
    let mut acc = BlockGrads::zeros_like(model);
    for b in &eval.chunks {
        let w = b.len() as f64 / eval.len as f64;
        let (l, g) = model.gradients(b, head)?;
        loss += l * w;
        for (a, gi) in acc.blocks_mut().iter_mut().zip(g.blocks()) {
            for (av, gv) in a.data_mut().iter_mut().zip(gi.data()) {
                *av += w * gv;
            }
        }
    }
    Ok((loss, acc))
}

/// Identity of one parameter block in a ledger, echoed into the report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub kind: ParamKind,
    /// `Some(h)` for blocks owned by output head `h`.
    pub head: Option<usize>,
}

/// Attributed loss change for one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAttribution {
    pub name: String,
    pub kind: ParamKind,
    pub head: Option<usize>,
    pub n_elements: usize,
    /// Signed sum of per-parameter contributions over the block.
    pub sum: f64,
    /// Per-parameter contributions, flattened in the block's storage order.
    pub values: Vec<f64>,
}

/// Result of one tracked training trajectory: where the reference loss
/// started and ended, and how the change distributes over parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub config: PathIntegralConfig,
    /// Output head the reference loss was read from.
    pub head: usize,
    pub eval_set_size: usize,
    pub eval_fingerprint: u64,
    pub steps_recorded: u64,
    /// Reference loss before the first recorded step.
    pub loss_start: f64,
    /// Reference loss after the last recorded step.
    pub loss_end: f64,
    /// Directly measured change: `loss_end - loss_start`.
    pub exact_delta: f64,
    /// Quadrature total: sum of every per-parameter contribution.
    pub approx_delta: f64,
    /// |approx − exact| / max(|exact|, 1e-8).
    pub relative_error: f64,
    pub blocks: Vec<BlockAttribution>,
}

impl AttributionReport {
    /// The block's contribution sums, in block order.
    pub fn block_sums(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.sum).collect()
    }
}

/// Running per-parameter decomposition of a reference loss change along a
/// training trajectory.
///
/// The contract: record every optimizer step, exactly once, in order. The
/// ledger keeps the trajectory point each step must start from and rejects a
/// step whose `theta_before` is not bitwise identical to it, which catches
/// skipped, duplicated, and out-of-order recordings.
#[derive(Debug)]
pub struct AttributionLedger {
    config: PathIntegralConfig,
    blocks: Vec<BlockInfo>,
    /// Per-parameter contribution totals, same shapes as the tracked blocks.
    accum: Vec<Tensor>,
    /// The trajectory point after the last recorded step.
    theta: Vec<Tensor>,
    /// Gradient at `theta`, left over from a trapezoid endpoint evaluation;
    /// reused as the next step's t=0 node.
    cached_end: Option<Vec<Tensor>>,
    loss_start: f64,
    steps: u64,
    eval_fingerprint: u64,
    eval_set_size: usize,
    head: usize,
}

impl AttributionLedger {
    /// Open a ledger at the current trajectory point `theta`, measuring the
    /// starting reference loss.
    pub fn begin<F: LossField>(
        field: &mut F,
        blocks: Vec<BlockInfo>,
        theta: Vec<Tensor>,
        config: PathIntegralConfig,
    ) -> Result<AttributionLedger> {
        if config.substeps == 0 {
            return Err(Error::InvalidArgument {
                op: "AttributionLedger::begin",
                reason: "substeps must be at least 1".into(),
            });
        }
        if blocks.len() != theta.len() {
            return Err(Error::InvalidArgument {
                op: "AttributionLedger::begin",
                reason: format!(
                    "{} block descriptors for {} parameter tensors",
                    blocks.len(),
                    theta.len()
                ),
            });
        }
        let loss_start = field.loss(&theta)?;
        let accum = theta
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Ok(AttributionLedger {
            config,
            blocks,
            accum,
            theta,
            cached_end: None,
            loss_start,
            steps: 0,
            eval_fingerprint: 0,
            eval_set_size: 0,
            head: 0,
        })
    }

    pub fn steps_recorded(&self) -> u64 {
        self.steps
    }

    pub fn loss_start(&self) -> f64 {
        self.loss_start
    }

    /// Accumulate one optimizer step θ_before → θ_before + Δθ.
    ///
    /// Evaluates the field's gradient at the quadrature nodes on the segment
    /// and adds w·g_i(node)·Δθ_i into each parameter's running total.
    /// `theta_before` must be the point the previous recording ended at.
    pub fn record_step<F: LossField>(
        &mut self,
        field: &mut F,
        theta_before: &[Tensor],
        delta: &[Tensor],
    ) -> Result<()> {
        self.check_point("theta_before", theta_before)?;
        self.check_point("delta", delta)?;
        for (i, (have, want)) in theta_before.iter().zip(&self.theta).enumerate() {
            if have.data() != want.data() {
                return Err(Error::Usage(format!(
                    "step does not start at the current trajectory point (block {i}, {}): \
                     every optimizer step must be recorded exactly once, in order",
                    self.blocks[i].name
                )));
            }
        }

        let mut mean_grad: Vec<Tensor> = self
            .accum
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut next_end: Option<Vec<Tensor>> = None;
        for (t, w) in nodes(&self.config) {
            let g = match self.cached_end.take() {
                Some(g) if t == 0.0 => g,
                cached => {
                    self.cached_end = cached;
                    let point = interpolate(theta_before, delta, t);
                    field.loss_and_grad(&point)?.1
                }
            };
            if g.len() != mean_grad.len() {
                return Err(Error::InvalidArgument {
                    op: "AttributionLedger::record_step",
                    reason: format!(
                        "field returned {} gradient tensors for {} blocks",
                        g.len(),
                        mean_grad.len()
                    ),
                });
            }
            for (m, gi) in mean_grad.iter_mut().zip(&g) {
                for (mv, gv) in m.data_mut().iter_mut().zip(gi.data()) {
                    *mv += w * gv;
                }
            }
            if t == 1.0 && self.config.quadrature == Quadrature::Trapezoid {
                next_end = Some(g);
            }
        }

        for ((acc, m), d) in self.accum.iter_mut().zip(&mean_grad).zip(delta) {
            for ((av, mv), dv) in acc.data_mut().iter_mut().zip(m.data()).zip(d.data()) {
                *av += mv * dv;
            }
        }
        self.theta = interpolate(theta_before, delta, 1.0);
        self.cached_end = next_end;
        self.steps += 1;
        Ok(())
    }

    /// Measure the final reference loss and reconcile the accumulated totals
    /// against it.
    pub fn finalize<F: LossField>(self, field: &mut F) -> Result<AttributionReport> {
        if self.steps == 0 {
            return Err(Error::Usage(
                "attribution ledger finalized with no recorded steps".into(),
            ));
        }
        let loss_end = field.loss(&self.theta)?;
        let exact_delta = loss_end - self.loss_start;
        let approx_delta: f64 = self.accum.iter().map(|t| t.data().iter().sum::<f64>()).sum();
        let relative_error = (approx_delta - exact_delta).abs() / exact_delta.abs().max(REL_ERR_FLOOR);
        let blocks = self
            .blocks
            .into_iter()
            .zip(self.accum)
            .map(|(info, acc)| {
                let sum = acc.data().iter().sum();
                BlockAttribution {
                    name: info.name,
                    kind: info.kind,
                    head: info.head,
                    n_elements: acc.data().len(),
                    sum,
                    values: acc.into_data(),
                }
            })
            .collect();
        Ok(AttributionReport {
            config: self.config,
            head: self.head,
            eval_set_size: self.eval_set_size,
            eval_fingerprint: self.eval_fingerprint,
            steps_recorded: self.steps,
            loss_start: self.loss_start,
            loss_end,
            exact_delta,
            approx_delta,
            relative_error,
            blocks,
        })
    }

    fn check_point(&self, what: &'static str, point: &[Tensor]) -> Result<()> {
        if point.len() != self.accum.len() {
            return Err(Error::InvalidArgument {
                op: "AttributionLedger::record_step",
                reason: format!(
                    "{what} has {} tensors, ledger tracks {}",
                    point.len(),
                    self.accum.len()
                ),
            });
        }
        for (p, a) in point.iter().zip(&self.accum) {
            if p.shape() != a.shape() {
                return Err(Error::ShapeMismatch {
                    op: "AttributionLedger::record_step",
                    lhs: p.shape().to_vec(),
                    rhs: a.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// θ_before + t·Δθ, elementwise. At t = 1 this reproduces the optimizer's own
/// `θ += Δθ` bit for bit, so endpoint evaluations land exactly on the
/// trajectory.
fn interpolate(before: &[Tensor], delta: &[Tensor], t: f64) -> Vec<Tensor> {
    before
        .iter()
        .zip(delta)
        .map(|(b, d)| {
            let data = b
                .data()
                .iter()
                .zip(d.data())
                .map(|(&bv, &dv)| bv + t * dv)
                .collect();
            Tensor::new(b.shape().to_vec(), data).expect("interpolation preserves shape")
        })
        .collect()
}

/// Open a ledger over `model`'s parameters with the reference loss read from
/// `head` on `eval`. The model must already sit at the trajectory start.
pub fn begin_tracking(
    model: &mut Model,
    eval: &EvalSet,
    head: usize,
    config: PathIntegralConfig,
) -> Result<AttributionLedger> {
    model.check_head(head)?;
    let blocks = model
        .blocks()
        .iter()
        .map(|b| BlockInfo {
            name: b.name.clone(),
            kind: b.kind,
            head: b.head,
        })
        .collect();
    let theta = model.snapshot().blocks().to_vec();
    let mut field = TaskLossField { model, eval, head };
    let mut ledger = AttributionLedger::begin(&mut field, blocks, theta, config)?;
    ledger.eval_fingerprint = eval.fingerprint();
    ledger.eval_set_size = eval.len();
    ledger.head = head;
    Ok(ledger)
}

/// Record one optimizer step of `model`. `theta_before` is the snapshot taken
/// just before the step, `delta` the update the optimizer returned; the model
/// itself must already sit at θ_before + Δθ and is restored there bit-exactly
/// after the quadrature evaluations.
pub fn record_step(
    ledger: &mut AttributionLedger,
    model: &mut Model,
    eval: &EvalSet,
    theta_before: &ParamSnapshot,
    delta: &StepDelta,
) -> Result<()> {
    check_eval(ledger, eval)?;
    let after = model.snapshot();
    let head = ledger.head;
    let mut field = TaskLossField { model, eval, head };
    ledger.record_step(&mut field, theta_before.blocks(), delta.blocks())?;
    model.restore(&after);
    Ok(())
}

/// Close the ledger and build the report. The model must sit at the last
/// recorded point; it is left there.
pub fn finalize(
    ledger: AttributionLedger,
    model: &mut Model,
    eval: &EvalSet,
) -> Result<AttributionReport> {
    check_eval(&ledger, eval)?;
    let at = model.snapshot();
    let head = ledger.head;
    let mut field = TaskLossField { model, eval, head };
    let report = ledger.finalize(&mut field)?;
    model.restore(&at);
    Ok(report)
}

fn check_eval(ledger: &AttributionLedger, eval: &EvalSet) -> Result<()> {
    if eval.fingerprint() != ledger.eval_fingerprint {
        return Err(Error::Usage(format!(
            "evaluation set fingerprint {:016x} does not match the ledger's {:016x}; \
             the same evaluation set must back every measurement of one ledger",
            eval.fingerprint(),
            ledger.eval_fingerprint
        )));
    }
    Ok(())
}
