//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`GradientTape`] records each operation eagerly; [`GradientTape::backward`]
//! replays the record in reverse, accumulating adjoints. Node ids are strictly
//! increasing, so a single reverse sweep visits every consumer of a value
//! before the value itself.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, ConvGeom, Tensor};

/// Handle to a value recorded on a [`GradientTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    MatMul {
        a: ValueId,
        b: ValueId,
    },
    Conv2d {
        input: ValueId,
        kernels: ValueId,
        bias: ValueId,
        stride: usize,
    },
    AddRowBias {
        x: ValueId,
        bias: ValueId,
    },
    Relu {
        x: ValueId,
    },
    Dropout {
        x: ValueId,
        mask: Vec<f64>,
    },
    Reshape {
        x: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Sum {
        x: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eager computation graph for one forward pass.
#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by a backward sweep. Only leaf nodes retain their
/// gradient; intermediate buffers are consumed during the sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf, or `None` if the loss does not
    /// depend on it (or it was recorded as a constant).
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient (e.g. image batches).
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernels: ValueId,
        bias: ValueId,
        stride: usize,
    ) -> Result<ValueId> {
        let value = tensor::conv2d(self.value(input), self.value(kernels), self.value(bias), stride)?;
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
            },
            needs,
        ))
    }

    /// Adds a length-`N` bias vector to every row of a `B x N` tensor.
    pub fn add_row_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let ([_, n], [bn]) = (&xv.shape()[..], &bv.shape()[..]) else {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        if n != bn {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(*n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias { x, bias }, needs))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let value = tensor::relu(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    /// Samples a fresh inverted-dropout mask and applies it.
    pub fn dropout(&mut self, x: ValueId, rate: f64, rng: &mut ChaCha8Rng) -> Result<ValueId> {
        let xv = self.value(x);
        let mask = tensor::dropout_mask(xv.len(), rate, rng)?;
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    pub fn reshape(&mut self, x: ValueId, shape: impl Into<Vec<usize>>) -> Result<ValueId> {
        let value = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.value(x).shape();
        if shape.is_empty() {
            return Err(Error::InvalidArgument {
                op: "flatten",
                reason: "cannot flatten a scalar".into(),
            });
        }
        let b = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, [b, rest])
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let av = self.value(a);
        let bv = self.value(b);
        av.same_shape(bv, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum { x }, needs)
    }

    /// Mean cross-entropy between `B x C` logits and integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), labels)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Accumulates `d/d input` of `loss` for every leaf `loss` depends on.
    ///
    /// `loss` must be a single-element value recorded on this tape.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward target {} is not on this tape ({} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward target must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::new(seed_shape, vec![1.0]).expect("scalar seed"));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue; // leaf grads stay in place for the caller
            }
            let Some(d_out) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &d_out, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Adds this node's contribution to the adjoint of each of its inputs.
    fn propagate(&self, id: usize, d_out: &Tensor, grads: &mut [Option<Tensor>]) {
        // Gradient buffers are created on first touch; inputs always have
        // smaller ids than the node itself.
        let acc = |grads: &mut [Option<Tensor>], target: ValueId, f: &mut dyn FnMut(&mut Tensor)| {
            if !self.needs(target) {
                return;
            }
            let slot = &mut grads[target.0];
            let g = slot.get_or_insert_with(|| Tensor::zeros(self.value(target).shape().to_vec()));
            f(g);
        };

        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves are skipped in the sweep"),
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(grads, *a, &mut |g| {
                    // dA += dC . B^T
                    gemm(m, n, k, 1.0, d_out.data(), false, bv.data(), true, 1.0, g.data_mut());
                });
                acc(grads, *b, &mut |g| {
                    // dB += A^T . dC
                    gemm(k, m, n, 1.0, av.data(), true, d_out.data(), false, 1.0, g.data_mut());
                });
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
            } => {
                let xv = self.value(*input);
                let kv = self.value(*kernels);
                let geom = ConvGeom::resolve(xv, kv, self.value(*bias), *stride)
                    .expect("shapes were validated when the op was recorded");
                let (r, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                if self.needs(*kernels) {
                    // dK += cols^T . dOut, with cols rebuilt from the saved input.
                    let mut cols = vec![0.0; r * patch];
                    geom.im2col(xv.data(), &mut cols);
                    acc(grads, *kernels, &mut |g| {
                        gemm(patch, r, cout, 1.0, &cols, true, d_out.data(), false, 1.0, g.data_mut());
                    });
                }
                acc(grads, *bias, &mut |g| {
                    for row in d_out.data().chunks(cout) {
                        for (gb, d) in g.data_mut().iter_mut().zip(row) {
                            *gb += d;
                        }
                    }
                });
                if self.needs(*input) {
                    // dX += col2im(dOut . K^T)
                    let mut dcols = vec![0.0; r * patch];
                    gemm(r, cout, patch, 1.0, d_out.data(), false, kv.data(), true, 0.0, &mut dcols);
                    acc(grads, *input, &mut |g| geom.col2im(&dcols, g.data_mut()));
                }
            }
            Op::AddRowBias { x, bias } => {
                let n = self.value(*bias).len();
                acc(grads, *x, &mut |g| {
                    for (gv, d) in g.data_mut().iter_mut().zip(d_out.data()) {
                        *gv += d;
                    }
                });
                acc(grads, *bias, &mut |g| {
                    for row in d_out.data().chunks(n) {
                        for (gb, d) in g.data_mut().iter_mut().zip(row) {
                            *gb += d;
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                acc(grads, *x, &mut |g| {
                    for ((gv, d), &v) in g.data_mut().iter_mut().zip(d_out.data()).zip(xv.data()) {
                        if v > 0.0 {
                            *gv += d;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, &mut |g| {
                    for ((gv, d), m) in g.data_mut().iter_mut().zip(d_out.data()).zip(mask) {
                        *gv += d * m;
                    }
                });
            }
            Op::Reshape { x } => {
                acc(grads, *x, &mut |g| {
                    for (gv, d) in g.data_mut().iter_mut().zip(d_out.data()) {
                        *gv += d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                acc(grads, *a, &mut |g| {
                    for ((gv, d), y) in g.data_mut().iter_mut().zip(d_out.data()).zip(bv.data()) {
                        *gv += d * y;
                    }
                });
                acc(grads, *b, &mut |g| {
                    for ((gv, d), x) in g.data_mut().iter_mut().zip(d_out.data()).zip(av.data()) {
                        *gv += d * x;
                    }
                });
            }
            Op::Sum { x } => {
                let d = d_out.item();
                acc(grads, *x, &mut |g| {
                    for gv in g.data_mut().iter_mut() {
                        *gv += d;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let d = d_out.item();
                let b = labels.len();
                let c = probs.shape()[1];
                let scale = d / b as f64;
                acc(grads, *logits, &mut |g| {
                    for (i, (grow, prow)) in g
                        .data_mut()
                        .chunks_mut(c)
                        .zip(probs.data().chunks(c))
                        .enumerate()
                    {
                        for (j, (gv, &p)) in grow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            *gv += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}
