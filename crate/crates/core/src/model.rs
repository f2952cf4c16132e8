//! The fixed convolutional classifier whose forgetting is being attributed.
//!
//! Architecture (28x28x1 inputs, NHWC):
//!
//! ```text
//! conv 32 @ 3x3 stride 2, relu        -> 14 x 14 x 32
//! conv 32 @ 3x3 stride 2, relu        ->  7 x  7 x 32
//! dense 64, relu   (dropout 0.2 on its input when training)
//! dense 32, relu   (dropout 0.2)
//! dense 10 per head (dropout 0.2), softmax cross-entropy
//! ```
//!
//! Every trainable array is a named [`ParameterBlock`]; block order is fixed
//! and everything downstream (optimizer state, attribution ledgers, reports)
//! indexes blocks by that order.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradientTape, ValueId};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 28;
pub const CLASS_COUNT: usize = 10;
pub const DROPOUT_RATE: f64 = 0.2;
const CONV_CHANNELS: usize = 32;
const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const DENSE1_UNITS: usize = 64;
const DENSE2_UNITS: usize = 32;
/// 7 * 7 * 32 activations entering the first dense layer.
const FLATTENED: usize = 7 * 7 * CONV_CHANNELS;

/// Whether a forward pass samples dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
        })
    }
}

/// One named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub name: String,
    pub kind: ParamKind,
    /// `Some(h)` for blocks that belong to output head `h` only.
    pub head: Option<usize>,
    pub values: Tensor,
}

/// Model shape configuration. The layer stack is fixed; only the number of
/// output heads varies (task-incremental runs give each task its own head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { head_count: 1 }
    }
}

/// A mini-batch of normalized images with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    images: Tensor,
    labels: Vec<usize>,
}

impl Batch {
    /// `images` must be `B x 28 x 28 x 1` with one label per image.
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let [b, h, w, c] = images.shape()[..] else {
            return Err(Error::InvalidArgument {
                op: "Batch::new",
                reason: format!("expected B x H x W x C images, got {:?}", images.shape()),
            });
        };
        if h != IMAGE_SIDE || w != IMAGE_SIDE || c != 1 {
            return Err(Error::InvalidArgument {
                op: "Batch::new",
                reason: format!("expected {IMAGE_SIDE} x {IMAGE_SIDE} x 1 images, got {:?}", images.shape()),
            });
        }
        if b == 0 {
            return Err(Error::InvalidArgument {
                op: "Batch::new",
                reason: "empty batch".into(),
            });
        }
        if labels.len() != b {
            return Err(Error::InvalidArgument {
                op: "Batch::new",
                reason: format!("{b} images but {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= CLASS_COUNT) {
            return Err(Error::InvalidArgument {
                op: "Batch::new",
                reason: format!("label {bad} out of range"),
            });
        }
        Ok(Batch { images, labels })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-block gradients, aligned with [`Model::blocks`]. Blocks the loss does
/// not reach (e.g. inactive heads) hold exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    grads: Vec<Tensor>,
}

impl BlockGrads {
    pub fn zeros_like(model: &Model) -> Self {
        BlockGrads {
            grads: model
                .blocks
                .iter()
                .map(|b| Tensor::zeros(b.values.shape().to_vec()))
                .collect(),
        }
    }

    pub(crate) fn from_vec(grads: Vec<Tensor>) -> Self {
        BlockGrads { grads }
    }

    pub fn block(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn blocks_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn into_blocks(self) -> Vec<Tensor> {
        self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A copy of every block's values, used to restore or interpolate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    values: Vec<Tensor>,
}

impl ParamSnapshot {
    pub fn block(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One recorded forward pass; consume it to get per-block gradients.
pub struct ForwardPass {
    tape: GradientTape,
    loss_id: ValueId,
    param_ids: Vec<ValueId>,
}

impl ForwardPass {
    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss_id).item()
    }

    pub fn into_gradients(self) -> Result<BlockGrads> {
        let mut grads = self.tape.backward(self.loss_id)?;
        let out = self
            .param_ids
            .iter()
            .map(|&id| match grads.take(id) {
                Some(g) => g,
                None => Tensor::zeros(self.tape.value(id).shape().to_vec()),
            })
            .collect();
        Ok(BlockGrads::from_vec(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    blocks: Vec<ParameterBlock>,
}

impl Model {
    /// Builds a model with fan-in-scaled uniform weights (`U(+-1/sqrt(fan_in))`)
    /// and zero biases. The same `(config, seed)` always yields identical bits.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.head_count == 0 {
            return Err(Error::InvalidArgument {
                op: "Model::build",
                reason: "head_count must be at least 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut layer = |name: &str, head: Option<usize>, w_shape: Vec<usize>, fan_in: usize, out: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = w_shape.iter().product();
            let values = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
            blocks.push(ParameterBlock {
                name: format!("{name}.weight"),
                kind: ParamKind::Weight,
                head,
                values: Tensor::new(w_shape, values).expect("init shape"),
            });
            blocks.push(ParameterBlock {
                name: format!("{name}.bias"),
                kind: ParamKind::Bias,
                head,
                values: Tensor::zeros([out]),
            });
        };
        layer("conv1", None, vec![CONV_KERNEL, CONV_KERNEL, 1, CONV_CHANNELS], CONV_KERNEL * CONV_KERNEL, CONV_CHANNELS, &mut rng);
        layer("conv2", None, vec![CONV_KERNEL, CONV_KERNEL, CONV_CHANNELS, CONV_CHANNELS], CONV_KERNEL * CONV_KERNEL * CONV_CHANNELS, CONV_CHANNELS, &mut rng);
        layer("dense1", None, vec![FLATTENED, DENSE1_UNITS], FLATTENED, DENSE1_UNITS, &mut rng);
        layer("dense2", None, vec![DENSE1_UNITS, DENSE2_UNITS], DENSE1_UNITS, DENSE2_UNITS, &mut rng);
        for h in 0..config.head_count {
            layer(&format!("head{h}"), Some(h), vec![DENSE2_UNITS, CLASS_COUNT], DENSE2_UNITS, CLASS_COUNT, &mut rng);
        }
        Ok(Model { config, blocks })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn blocks(&self) -> &[ParameterBlock] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &ParameterBlock {
        &self.blocks[i]
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            values: self.blocks.iter().map(|b| b.values.clone()).collect(),
        }
    }

    pub fn restore(&mut self, snapshot: &ParamSnapshot) {
        assert_eq!(snapshot.values.len(), self.blocks.len(), "snapshot/model block mismatch");
        for (block, values) in self.blocks.iter_mut().zip(&snapshot.values) {
            assert_eq!(block.values.shape(), values.shape(), "snapshot shape mismatch");
            block.values = values.clone();
        }
    }

    /// Overwrites block values in place (shapes must match the model's).
    pub fn set_block_values(&mut self, i: usize, values: &[f64]) {
        assert_eq!(self.blocks[i].values.len(), values.len());
        self.blocks[i].values.data_mut().copy_from_slice(values);
    }

    /// Mutable view of one block's values (the shape itself is fixed).
    pub fn block_values_mut(&mut self, i: usize) -> &mut [f64] {
        self.blocks[i].values.data_mut()
    }

    pub(crate) fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.config.head_count {
            return Err(Error::Usage(format!(
                "head {head} out of range: model has {} head(s)",
                self.config.head_count
            )));
        }
        Ok(())
    }

    /// Runs the network on a batch and records the computation on a tape.
    ///
    /// In [`Mode::Eval`] no dropout is applied and `rng` is never touched, so
    /// the result is a pure function of the parameters and the batch.
    pub fn forward_loss(
        &self,
        batch: &Batch,
        mode: Mode,
        head: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        self.check_head(head)?;
        let mut tape = GradientTape::new();
        let param_ids: Vec<ValueId> = self
            .blocks
            .iter()
            .map(|b| tape.leaf(b.values.clone()))
            .collect();
        // Block layout: [conv1 w,b, conv2 w,b, dense1 w,b, dense2 w,b, head0 w,b, ...]
        let (w1, b1, w2, b2) = (param_ids[0], param_ids[1], param_ids[2], param_ids[3]);
        let (w3, b3, w4, b4) = (param_ids[4], param_ids[5], param_ids[6], param_ids[7]);
        let (wh, bh) = (param_ids[8 + 2 * head], param_ids[9 + 2 * head]);

        let x = tape.constant(batch.images.clone());
        let c1 = tape.conv2d(x, w1, b1, CONV_STRIDE)?;
        let a1 = tape.relu(c1);
        let c2 = tape.conv2d(a1, w2, b2, CONV_STRIDE)?;
        let a2 = tape.relu(c2);
        let mut h = tape.flatten(a2)?;

        let dense = |tape: &mut GradientTape, x: ValueId, w: ValueId, b: ValueId, rng: &mut ChaCha8Rng| -> Result<ValueId> {
            let x = match mode {
                Mode::Train => tape.dropout(x, DROPOUT_RATE, rng)?,
                Mode::Eval => x,
            };
            let z = tape.matmul(x, w)?;
            tape.add_row_bias(z, b)
        };
        h = dense(&mut tape, h, w3, b3, rng)?;
        h = tape.relu(h);
        h = dense(&mut tape, h, w4, b4, rng)?;
        h = tape.relu(h);
        let logits = dense(&mut tape, h, wh, bh, rng)?;
        let loss_id = tape.softmax_cross_entropy(logits, &batch.labels)?;

        Ok(ForwardPass {
            tape,
            loss_id,
            param_ids,
        })
    }

    /// Eval-mode mean loss on a batch.
    pub fn loss(&self, batch: &Batch, head: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0); // untouched in eval mode
        Ok(self.forward_loss(batch, Mode::Eval, head, &mut rng)?.loss())
    }

    /// Eval-mode loss and per-block gradients on a batch.
    pub fn gradients(&self, batch: &Batch, head: usize) -> Result<(f64, BlockGrads)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward_loss(batch, Mode::Eval, head, &mut rng)?;
        let loss = pass.loss();
        Ok((loss, pass.into_gradients()?))
    }

    /// Writes all parameters to a versioned JSON manifest.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let file = SnapshotFile {
            format_version: SNAPSHOT_VERSION,
            head_count: self.config.head_count,
            blocks: self
                .blocks
                .iter()
                .map(|b| SnapshotBlock {
                    name: b.name.clone(),
                    kind: b.kind,
                    head: b.head,
                    shape: b.values.shape().to_vec(),
                    values: b.values.data().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a model from [`Model::save_snapshot`] output.
    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: SnapshotFile = serde_json::from_slice(&bytes)?;
        if file.format_version != SNAPSHOT_VERSION {
            return Err(Error::Usage(format!(
                "unsupported snapshot format_version {} (expected {SNAPSHOT_VERSION})",
                file.format_version
            )));
        }
        let mut model = Model::build(
            ModelConfig {
                head_count: file.head_count,
            },
            0,
        )?;
        if file.blocks.len() != model.blocks.len() {
            return Err(Error::Usage(format!(
                "snapshot has {} blocks, expected {}",
                file.blocks.len(),
                model.blocks.len()
            )));
        }
        for (block, saved) in model.blocks.iter_mut().zip(file.blocks) {
            if saved.name != block.name || saved.kind != block.kind || saved.head != block.head {
                return Err(Error::Usage(format!(
                    "snapshot block {:?} does not match expected {:?}",
                    saved.name, block.name
                )));
            }
            if saved.shape != block.values.shape() {
                return Err(Error::Usage(format!(
                    "snapshot block {:?} has shape {:?}, expected {:?}",
                    block.name,
                    saved.shape,
                    block.values.shape()
                )));
            }
            block.values = Tensor::new(saved.shape, saved.values).map_err(|_| {
                Error::Usage(format!("snapshot block {:?} has inconsistent data length", block.name))
            })?;
        }
        Ok(model)
    }
}

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format_version: u32,
    head_count: usize,
    blocks: Vec<SnapshotBlock>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotBlock {
    name: String,
    kind: ParamKind,
    head: Option<usize>,
    shape: Vec<usize>,
    values: Vec<f64>,
}
