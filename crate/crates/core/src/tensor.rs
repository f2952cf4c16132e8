//! Dense row-major f64 tensors and the numeric kernels the model is built on.
//!
//! Shapes follow the NHWC convention: images are `B x H x W x C`, convolution
//! kernels are `Kh x Kw x Cin x Cout`, matrices are `rows x cols`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A dense tensor of `f64` values in row-major order.
///
/// The empty shape `[]` denotes a scalar holding exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                reason: format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extracts the value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Returns a copy of this tensor with a new shape of equal volume.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Checks that two tensors have identical shapes.
    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// `C = alpha * A . B + beta * C` on row-major buffers.
///
/// `m`, `k`, `n` are the logical dimensions of the product; `trans_a` /
/// `trans_b` read the corresponding buffer as its transpose without copying
/// (so a `trans_a` operand is physically `k x m`).
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
    assert_eq!(c.len(), m * n, "gemm: out buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of an `m x k` and a `k x n` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, ka], &[kb, n]) = (&a.shape[..], &b.shape[..]) else {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros([m, n]);
    gemm(m, ka, n, 1.0, &a.data, false, &b.data, false, 0.0, &mut out.data);
    Ok(out)
}

/// Geometry of one spatial axis under "same" padding: output size is
/// `ceil(extent / stride)` and the shortfall is padded, biased toward the
/// trailing edge when odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisPad {
    pub out: usize,
    pub before: usize,
}

pub fn same_padding(extent: usize, kernel: usize, stride: usize) -> AxisPad {
    assert!(stride > 0 && extent > 0 && kernel > 0);
    let out = extent.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(extent);
    AxisPad {
        out,
        before: needed / 2,
    }
}

/// Shape bookkeeping shared by the convolution forward and backward passes.
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: (AxisPad, AxisPad),
    /// True when the input was rank 3 and the output should be too.
    pub squeeze_batch: bool,
}

impl ConvGeom {
    pub fn resolve(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Self> {
        let (squeeze_batch, batch, h, w, cin) = match input.shape[..] {
            [h, w, c] => (true, 1, h, w, c),
            [b, h, w, c] => (false, b, h, w, c),
            _ => {
                return Err(Error::InvalidArgument {
                    op: "conv2d",
                    reason: format!("input must be rank 3 or 4, got shape {:?}", input.shape),
                })
            }
        };
        let [kh, kw, kcin, cout] = kernels.shape[..] else {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: format!("kernels must be Kh x Kw x Cin x Cout, got {:?}", kernels.shape),
            });
        };
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape.clone(),
                rhs: kernels.shape.clone(),
            });
        }
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: kernels.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if batch == 0 || h == 0 || w == 0 || cin == 0 || kh == 0 || kw == 0 || cout == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: "zero-sized dimension".into(),
            });
        }
        Ok(ConvGeom {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad: (same_padding(h, kh, stride), same_padding(w, kw, stride)),
            squeeze_batch,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let (ph, pw) = self.pad;
        if self.squeeze_batch {
            vec![ph.out, pw.out, self.cout]
        } else {
            vec![self.batch, ph.out, pw.out, self.cout]
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.pad.0.out * self.pad.1.out
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Unfolds padded input patches into a `rows() x patch()` matrix whose
    /// column order matches a flattened `Kh x Kw x Cin x Cout` kernel tensor.
    pub fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let (ph, pw) = self.pad;
        let row_len = self.patch();
        assert_eq!(cols.len(), self.rows() * row_len);
        let mut row = 0;
        for b in 0..self.batch {
            let img = &input[b * self.h * self.w * self.cin..][..self.h * self.w * self.cin];
            for oy in 0..ph.out {
                for ox in 0..pw.out {
                    let dst = &mut cols[row * row_len..][..row_len];
                    let y0 = (oy * self.stride) as isize - ph.before as isize;
                    let x0 = (ox * self.stride) as isize - pw.before as isize;
                    for ky in 0..self.kh {
                        let y = y0 + ky as isize;
                        let seg = &mut dst[ky * self.kw * self.cin..][..self.kw * self.cin];
                        if y < 0 || y >= self.h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let line = &img[y as usize * self.w * self.cin..][..self.w * self.cin];
                        for kx in 0..self.kw {
                            let x = x0 + kx as isize;
                            let cell = &mut seg[kx * self.cin..][..self.cin];
                            if x < 0 || x >= self.w as isize {
                                cell.fill(0.0);
                            } else {
                                cell.copy_from_slice(&line[x as usize * self.cin..][..self.cin]);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds a `rows() x patch()` gradient matrix back onto the input.
    pub fn col2im(&self, dcols: &[f64], dinput: &mut [f64]) {
        let (ph, pw) = self.pad;
        let row_len = self.patch();
        assert_eq!(dcols.len(), self.rows() * row_len);
        assert_eq!(dinput.len(), self.batch * self.h * self.w * self.cin);
        let mut row = 0;
        for b in 0..self.batch {
            let img = &mut dinput[b * self.h * self.w * self.cin..][..self.h * self.w * self.cin];
            for oy in 0..ph.out {
                for ox in 0..pw.out {
                    let src = &dcols[row * row_len..][..row_len];
                    let y0 = (oy * self.stride) as isize - ph.before as isize;
                    let x0 = (ox * self.stride) as isize - pw.before as isize;
                    for ky in 0..self.kh {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let seg = &src[ky * self.kw * self.cin..][..self.kw * self.cin];
                        let line = &mut img[y as usize * self.w * self.cin..][..self.w * self.cin];
                        for kx in 0..self.kw {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            for (d, s) in line[x as usize * self.cin..][..self.cin]
                                .iter_mut()
                                .zip(&seg[kx * self.cin..][..self.cin])
                            {
                                *d += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 2-D convolution with "same" padding and a per-channel bias.
///
/// `input` is `H x W x Cin` or `B x H x W x Cin`; `kernels` is
/// `Kh x Kw x Cin x Cout`; the output spatial extent is `ceil(extent / stride)`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let geom = ConvGeom::resolve(input, kernels, bias, stride)?;
    let mut cols = vec![0.0; geom.rows() * geom.patch()];
    geom.im2col(&input.data, &mut cols);
    let mut out = Tensor::zeros(geom.out_shape());
    gemm(
        geom.rows(),
        geom.patch(),
        geom.cout,
        1.0,
        &cols,
        false,
        &kernels.data,
        false,
        0.0,
        &mut out.data,
    );
    for chunk in out.data.chunks_mut(geom.cout) {
        for (v, b) in chunk.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(out)
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Row-wise softmax of a `B x C` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [_, c] = logits.shape[..] else {
        return Err(Error::InvalidArgument {
            op: "softmax",
            reason: format!("expected B x C logits, got {:?}", logits.shape),
        });
    };
    if c == 0 {
        return Err(Error::InvalidArgument {
            op: "softmax",
            reason: "zero classes".into(),
        });
    }
    let mut out = logits.clone();
    for row in out.data.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of `B x C` logits against integer labels, plus the
/// softmax probabilities (which the backward pass reuses).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, c] = logits.shape[..] else {
        return Err(Error::InvalidArgument {
            op: "softmax_cross_entropy",
            reason: format!("expected B x C logits, got {:?}", logits.shape),
        });
    };
    if labels.len() != b {
        return Err(Error::InvalidArgument {
            op: "softmax_cross_entropy",
            reason: format!("{} logit rows but {} labels", b, labels.len()),
        });
    }
    if b == 0 {
        return Err(Error::InvalidArgument {
            op: "softmax_cross_entropy",
            reason: "empty batch".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument {
            op: "softmax_cross_entropy",
            reason: format!("label {} out of range for {} classes", bad, c),
        });
    }
    let probs = softmax(logits)?;
    let mut total = 0.0;
    for (row, &label) in probs.data.chunks(c).zip(labels) {
        // Guard against log(0) from extreme logits.
        total -= row[label].max(f64::MIN_POSITIVE).ln();
    }
    Ok((total / b as f64, probs))
}

/// Samples an inverted-dropout mask: each element is `0` with probability
/// `rate`, else `1 / (1 - rate)`, so the expected value of `x * mask` is `x`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument {
            op: "dropout",
            reason: format!("rate must be in [0, 1), got {rate}"),
        });
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| {
            if rand::Rng::random::<f64>(rng) < rate {
                0.0
            } else {
                keep
            }
        })
        .collect())
}

/// Applies dropout at the given rate using `rng` for mask sampling.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mask = dropout_mask(x.len(), rate, rng)?;
    let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn tensor(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    /// Straightforward triple-loop product used as an independent oracle.
    fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn tensor_new_rejects_wrong_volume() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let a = tensor([2, 2], vec![3.0, -1.0, 4.0, 2.5]);
        let eye = tensor([2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = tensor([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z = Tensor::zeros([3, 4]);
        let out = matmul(&a, &z).unwrap();
        assert_eq!(out.shape(), [2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = tensor([2, 3], vec![0.0; 6]);
        let b = tensor([4, 2], vec![0.0; 8]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 8)] {
            let a = tensor(
                [m, k],
                (0..m * k).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect(),
            );
            let b = tensor(
                [k, n],
                (0..k * n).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect(),
            );
            let fast = matmul(&a, &b).unwrap();
            let slow = matmul_naive(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn same_padding_splits_shortfall_toward_trailing_edge() {
        // 28 -> 14 with a 3-wide kernel at stride 2 needs a single trailing pad.
        let p = same_padding(28, 3, 2);
        assert_eq!((p.out, p.before), (14, 0));
        let q = same_padding(14, 3, 2);
        assert_eq!((q.out, q.before), (7, 0));
        // Stride 1 keeps the extent and pads both sides.
        let r = same_padding(5, 3, 1);
        assert_eq!((r.out, r.before), (5, 1));
    }

    #[test]
    fn conv2d_output_shapes_for_strided_stack() {
        let img = Tensor::zeros([28, 28, 1]);
        let k1 = Tensor::zeros([3, 3, 1, 32]);
        let b1 = Tensor::zeros([32]);
        let out1 = conv2d(&img, &k1, &b1, 2).unwrap();
        assert_eq!(out1.shape(), [14, 14, 32]);

        let k2 = Tensor::zeros([3, 3, 32, 32]);
        let out2 = conv2d(&out1, &k2, &b1, 2).unwrap();
        assert_eq!(out2.shape(), [7, 7, 32]);
    }

    #[test]
    fn conv2d_zero_kernels_yield_bias_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = tensor(
            [2, 6, 5, 3],
            (0..2 * 6 * 5 * 3).map(|_| rand::Rng::random::<f64>(&mut rng)).collect(),
        );
        let k = Tensor::zeros([3, 3, 3, 4]);
        let bias = tensor([4], vec![0.5, -1.0, 2.0, 0.0]);
        let out = conv2d(&img, &k, &bias, 2).unwrap();
        assert_eq!(out.shape(), [2, 3, 3, 4]);
        for chunk in out.data().chunks(4) {
            assert_eq!(chunk, bias.data());
        }
    }

    #[test]
    fn conv2d_matches_direct_summation() {
        // Independent direct-summation oracle over a small irregular case.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (h, w, cin, cout, kh, kw, stride) = (5, 7, 2, 3, 3, 2, 2);
        let img = tensor(
            [h, w, cin],
            (0..h * w * cin).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect(),
        );
        let ker = tensor(
            [kh, kw, cin, cout],
            (0..kh * kw * cin * cout)
                .map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5)
                .collect(),
        );
        let bias = tensor([cout], vec![0.1, -0.2, 0.3]);
        let out = conv2d(&img, &ker, &bias, stride).unwrap();

        let ph = same_padding(h, kh, stride);
        let pw = same_padding(w, kw, stride);
        assert_eq!(out.shape(), [ph.out, pw.out, cout]);
        for oy in 0..ph.out {
            for ox in 0..pw.out {
                for co in 0..cout {
                    let mut acc = bias.data()[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - ph.before as isize;
                            let x = (ox * stride + kx) as isize - pw.before as isize;
                            if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += img.data()[(y as usize * w + x as usize) * cin + ci]
                                    * ker.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let got = out.data()[(oy * pw.out + ox) * cout + co];
                    assert!((got - acc).abs() <= 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let img = Tensor::zeros([8, 8, 2]);
        let k = Tensor::zeros([3, 3, 3, 4]);
        let b = Tensor::zeros([4]);
        assert!(conv2d(&img, &k, &b, 1).is_err());
    }

    #[test]
    fn relu_clamps_and_is_idempotent() {
        let x = tensor([5], vec![-2.0, -0.0, 0.0, 0.5, 3.0]);
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 0.5, 3.0]);
        assert_eq!(relu(&y), y);
    }

    #[test]
    fn softmax_uniform_logits_give_uniform_probs() {
        let logits = tensor([2, 4], vec![0.3; 8]);
        let p = softmax(&logits).unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_class_count() {
        let logits = Tensor::zeros([3, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 5, 9]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_rewards_confident_correct_logits() {
        let mut logits = Tensor::zeros([1, 10]);
        logits.data_mut()[4] = 50.0;
        let (loss, probs) = softmax_cross_entropy(&logits, &[4]).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        assert!((probs.data()[4] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = tensor([2, 3], vec![1.0, -2.0, 0.5, 3.0, 3.0, -1.0]);
        let labels = [2usize, 0];
        let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut expected = 0.0;
        for (row, &label) in logits.data().chunks(3).zip(&labels) {
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[label].exp() / denom).ln();
        }
        expected /= 2.0;
        assert!((loss - expected).abs() <= 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::zeros([2, 3]);
        assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let x = tensor([4], vec![1.0, -2.0, 0.0, 7.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout(&x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = Tensor::zeros([4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout(&x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_zero_fraction_tracks_rate() {
        let n = 100_000;
        let rate = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = dropout_mask(n, rate, &mut rng).unwrap();
        let zeros = mask.iter().filter(|&&m| m == 0.0).count() as f64;
        // Binomial(n, 0.2): sd = sqrt(n * 0.2 * 0.8) ~ 126; allow 4 sigma.
        let sd = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!((zeros - n as f64 * rate).abs() <= 4.0 * sd, "zeros = {zeros}");
        let keep = 1.0 / (1.0 - rate);
        assert!(mask.iter().all(|&m| m == 0.0 || m == keep));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..5,
            cols in 1usize..8,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = tensor(
                [rows, cols],
                (0..rows * cols).map(|_| (rand::Rng::random::<f64>(&mut rng) - 0.5) * 20.0).collect(),
            );
            let p = softmax(&logits).unwrap();
            for row in p.data().chunks(cols) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn conv_output_extent_is_ceil_of_ratio(
            h in 1usize..40,
            w in 1usize..40,
            k in 1usize..6,
            stride in 1usize..4,
        ) {
            let ph = same_padding(h, k, stride);
            let pw = same_padding(w, k, stride);
            prop_assert_eq!(ph.out, h.div_ceil(stride));
            prop_assert_eq!(pw.out, w.div_ceil(stride));
            // The last output position still starts inside the unpadded extent,
            // so total padding stays below the kernel size.
            prop_assert!((ph.out - 1) * stride < h);
            prop_assert!(ph.before < k.max(1));
        }
    }
}
