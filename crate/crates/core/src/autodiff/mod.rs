//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every value produced by an operation is appended to a [`Tape`] and
//! addressed through a [`Var`] handle. Nodes are stored in creation order,
//! which is a valid topological order, so [`Tape::backward`] is a single
//! reverse sweep.
//!
//! ```
//! use coda_core::autodiff::Tape;
//! use coda_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, x).data(), &[6.0]);
//! ```

mod gradcheck;
pub mod kernels;
pub mod suite;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use kernels::{ConvGeom, NormGroups, NormLayout};

pub use gradcheck::{grad_check, relative_error};

/// Lower bound applied to every logarithm argument and probability denominator.
pub const CLAMP_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution padding (stride is always 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddChannel { x: Var, b: Var, c: usize, inner: usize },
    MulChannel { x: Var, s: Var, c: usize, inner: usize },
    MatMul(Var, Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    MinConst(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    MeanRows(Var),
    SumLastAxis(Var),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Concat(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, inner: usize },
    Normalize { x: Var, layout: NormLayout, inv_std: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for a single backward sweep.
///
/// A tape is confined to one thread; values can be copied out with
/// [`Tape::value`] and shared freely.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros if the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant node; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |a| a + c)
    }

    fn channel_layout(&self, name: &'static str, x: Var, b: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(CoreError::ShapeMismatch {
                op: name,
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        Ok((xs[1], xs[2..].iter().product()))
    }

    /// Adds a per-channel vector along axis 1 (bias for dense or conv outputs).
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, inner) = self.channel_layout("add_channel", x, b)?;
        let xv = &self.nodes[x.0].value;
        let bv = self.nodes[b.0].value.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + bv[(i / inner) % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_channel", out, Op::AddChannel { x, b, c, inner }, &[x, b])
    }

    /// Multiplies by a per-channel vector along axis 1.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, inner) = self.channel_layout("mul_channel", x, s)?;
        let xv = &self.nodes[x.0].value;
        let sv = self.nodes[s.0].value.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a * sv[(i / inner) % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("mul_channel", out, Op::MulChannel { x, s, c, inner }, &[x, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        kernels::matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            n,
            k,
            m,
        );
        let out = Tensor::matrix(n, m, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), libm::exp)
    }

    /// Natural log of `max(x, CLAMP_EPS)`.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map("ln", x, Op::Ln(x), |a| libm::log(a.max(CLAMP_EPS)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.map("leaky_relu", x, Op::LeakyRelu(x, alpha), |a| {
            if a > 0.0 {
                a
            } else {
                alpha * a
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), |a| {
            if a >= 0.0 {
                1.0 / (1.0 + libm::exp(-a))
            } else {
                let e = libm::exp(a);
                e / (1.0 + e)
            }
        })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, Op::Abs(x), libm::fabs)
    }

    /// Elementwise `min(x, cap)`; `cap` may be `+inf`.
    pub fn min_const(&mut self, x: Var, cap: f64) -> Result<Var> {
        self.map("min_const", x, Op::MinConst(x, cap), |a| a.min(cap))
    }

    fn rows_cols(&self, name: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(CoreError::InvalidShape {
                op: name,
                shape: s.to_vec(),
                reason: "expected a 2-D tensor",
            });
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise softmax of a 2-D tensor, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows_cols("softmax", x)?;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = libm::exp(v - mx);
                z += *o;
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= z;
            }
        }
        let out = Tensor::matrix(n, c, out)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows_cols("log_softmax", x)?;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(row.iter().map(|&v| libm::exp(v - mx)).sum::<f64>());
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let out = Tensor::matrix(n, c, out)?;
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        let a = self.abs(x)?;
        self.sum(a)
    }

    /// Sum of squares.
    pub fn sq_norm(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.data().iter().map(|v| v * v).sum();
        self.push("sq_norm", Tensor::scalar(s), Op::SqNorm(x), &[x])
    }

    /// Mean over the leading (batch) axis of a 2-D tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows_cols("mean_rows", x)?;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; c];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push("mean_rows", Tensor::vector(out), Op::MeanRows(x), &[x])
    }

    /// Row sums of a 2-D tensor, giving one value per sample.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows_cols("sum_last_axis", x)?;
        let xv = self.nodes[x.0].value.data();
        let out = (0..n).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
        self.push("sum_last_axis", Tensor::vector(out), Op::SumLastAxis(x), &[x])
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.rank() == 0 || start >= end || end > v.rows() {
            return Err(CoreError::InvalidShape {
                op: "slice_rows",
                shape: v.shape().to_vec(),
                reason: "row range out of bounds",
            });
        }
        let w = v.row_len();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, v.data()[start * w..end * w].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let shape = [v.rows(), v.row_len()];
        self.reshape(x, &shape)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::concat_rows(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.push("concat", out, Op::Concat(a, b), &[a, b])
    }

    /// Stride-1 2-D convolution of `x: [N,C,H,W]` with `w: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (kh, kw) = (ws[2], ws[3]);
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if kh != kw || kh % 2 == 0 {
                    return Err(CoreError::InvalidShape {
                        op: "conv2d",
                        shape: ws.to_vec(),
                        reason: "same padding needs a square odd kernel",
                    });
                }
                kh / 2
            }
        };
        if xs[2] + 2 * pad < kh || xs[3] + 2 * pad < kw {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh,
            kw,
            pad,
            ho: xs[2] + 2 * pad + 1 - kh,
            wo: xs[3] + 2 * pad + 1 - kw,
        };
        let out = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            &geom,
        );
        let out = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        self.push("conv2d", out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// 2×2 max pooling with stride 2 over `[N,C,H,W]`; odd trailing rows/cols are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(CoreError::InvalidShape {
                op: "max_pool2",
                shape: xs,
                reason: "expected [N,C,H,W] with H,W >= 2",
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = p * h * w + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + i * wo + j;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push("max_pool2", out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Mean over spatial positions: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(CoreError::InvalidShape {
                op: "global_avg_pool",
                shape: xs,
                reason: "expected [N,C,H,W]",
            });
        }
        let inner = xs[2] * xs[3];
        let xv = self.nodes[x.0].value.data();
        let out = (0..xs[0] * xs[1])
            .map(|p| xv[p * inner..(p + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let out = Tensor::new(vec![xs[0], xs[1]], out)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool { x, inner }, &[x])
    }

    fn normalize(&mut self, name: &'static str, x: Var, groups: NormGroups, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || (groups == NormGroups::PerPlane && xs.len() < 3) {
            return Err(CoreError::InvalidShape {
                op: name,
                shape: xs,
                reason: "expected [N,C,...]",
            });
        }
        let layout = NormLayout {
            n: xs[0],
            c: xs[1],
            inner: xs[2..].iter().product(),
            groups,
        };
        let xv = self.nodes[x.0].value.data();
        let (mean, var) = kernels::group_moments(xv, &layout);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let g = layout.group_of(i);
                (v - mean[g]) * inv_std[g]
            })
            .collect();
        let out = Tensor::new(xs, out)?;
        let v = self.push(name, out, Op::Normalize { x, layout, inv_std }, &[x])?;
        Ok((v, mean, var))
    }

    /// Standardizes each channel with batch statistics; returns the output
    /// plus the batch mean and biased variance per channel.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        if self.shape(x).first().copied().unwrap_or(0) < 2 {
            return Err(CoreError::InvalidShape {
                op: "batch_norm",
                shape: self.shape(x).to_vec(),
                reason: "batch statistics need at least 2 samples",
            });
        }
        self.normalize("batch_norm", x, NormGroups::PerChannel, eps)
    }

    /// Standardizes each channel with fixed statistics (eval-mode batch norm).
    pub fn channel_standardize(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        if mean.len() != c || var.len() != c {
            return Err(CoreError::ShapeMismatch {
                op: "channel_standardize",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mean.len()],
            });
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let shift: Vec<f64> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        let s = self.constant(Tensor::vector(scale));
        let b = self.constant(Tensor::vector(shift));
        let y = self.mul_channel(x, s)?;
        self.add_channel(y, b)
    }

    /// Standardizes every (sample, channel) plane of `[N,C,H,W]`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        Ok(self.normalize("instance_norm", x, NormGroups::PerPlane, eps)?.0)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(CoreError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(CoreError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        let n = g.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.needs(v) {
                        for (o, &gi) in acc(grads, v, n).iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    for (o, &gi) in acc(grads, *a, n).iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.needs(*b) {
                    for (o, &gi) in acc(grads, *b, n).iter_mut().zip(g) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.val(*b);
                    for ((o, &gi), &bi) in acc(grads, *a, n).iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let av = self.val(*a);
                    for ((o, &gi), &ai) in acc(grads, *b, n).iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (o, &gi) in acc(grads, *x, n).iter_mut().zip(g) {
                    *o += gi * c;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                for (o, &gi) in acc(grads, *x, n).iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::AddChannel { x, b, c, inner } => {
                if self.needs(*x) {
                    for (o, &gi) in acc(grads, *x, n).iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, *c);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[(i / inner) % c] += gi;
                    }
                }
            }
            Op::MulChannel { x, s, c, inner } => {
                let (c, inner) = (*c, *inner);
                if self.needs(*x) {
                    let sv = self.val(*s);
                    for (i, (o, &gi)) in acc(grads, *x, n).iter_mut().zip(g).enumerate() {
                        *o += gi * sv[(i / inner) % c];
                    }
                }
                if self.needs(*s) {
                    let xv = self.val(*x);
                    let gs = acc(grads, *s, c);
                    for (i, &gi) in g.iter().enumerate() {
                        gs[(i / inner) % c] += gi * xv[i];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (rows, k, m) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let bv = self.val(*b);
                    kernels::matmul_bt_acc(g, bv, acc(grads, *a, rows * k), rows, k, m);
                }
                if self.needs(*b) {
                    let av = self.val(*a);
                    kernels::matmul_at_acc(av, g, acc(grads, *b, k * m), rows, k, m);
                }
            }
            Op::Exp(x) => {
                for ((o, &gi), &yi) in acc(grads, *x, n).iter_mut().zip(g).zip(y) {
                    *o += gi * yi;
                }
            }
            Op::Ln(x) => {
                let xv = self.val(*x);
                for ((o, &gi), &xi) in acc(grads, *x, n).iter_mut().zip(g).zip(xv) {
                    if xi >= CLAMP_EPS {
                        *o += gi / xi;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                for ((o, &gi), &xi) in acc(grads, *x, n).iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::LeakyRelu(x, alpha) => {
                let xv = self.val(*x);
                for ((o, &gi), &xi) in acc(grads, *x, n).iter_mut().zip(g).zip(xv) {
                    *o += if xi > 0.0 { gi } else { gi * alpha };
                }
            }
            Op::Sigmoid(x) => {
                for ((o, &gi), &yi) in acc(grads, *x, n).iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
            Op::Abs(x) => {
                let xv = self.val(*x);
                for ((o, &gi), &xi) in acc(grads, *x, n).iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *o += gi;
                    } else if xi < 0.0 {
                        *o -= gi;
                    }
                }
            }
            Op::MinConst(x, cap) => {
                let xv = self.val(*x);
                for ((o, &gi), &xi) in acc(grads, *x, n).iter_mut().zip(g).zip(xv) {
                    if xi < *cap {
                        *o += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[1];
                let gx = acc(grads, *x, n);
                for i in 0..n / c {
                    let r = i * c..(i + 1) * c;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        gx[j] += y[j] * (g[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.value.shape()[1];
                let gx = acc(grads, *x, n);
                for i in 0..n / c {
                    let r = i * c..(i + 1) * c;
                    let gs: f64 = g[r.clone()].iter().sum();
                    for j in r {
                        gx[j] += g[j] - libm::exp(y[j]) * gs;
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.nodes[x.0].value.len();
                for o in acc(grads, *x, len) {
                    *o += g[0];
                }
            }
            Op::Mean(x) => {
                let len = self.nodes[x.0].value.len();
                let s = g[0] / len as f64;
                for o in acc(grads, *x, len) {
                    *o += s;
                }
            }
            Op::SqNorm(x) => {
                let xv = self.val(*x);
                for (o, &xi) in acc(grads, *x, xv.len()).iter_mut().zip(xv) {
                    *o += 2.0 * xi * g[0];
                }
            }
            Op::MeanRows(x) => {
                let len = self.nodes[x.0].value.len();
                let rows = len / n;
                let gx = acc(grads, *x, len);
                for i in 0..rows {
                    for j in 0..n {
                        gx[i * n + j] += g[j] / rows as f64;
                    }
                }
            }
            Op::SumLastAxis(x) => {
                let len = self.nodes[x.0].value.len();
                let c = len / n;
                let gx = acc(grads, *x, len);
                for i in 0..n {
                    for o in &mut gx[i * c..(i + 1) * c] {
                        *o += g[i];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let xv = &self.nodes[x.0].value;
                let w = xv.row_len();
                let gx = acc(grads, *x, xv.len());
                for (o, &gi) in gx[start * w..start * w + n].iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Concat(a, b) => {
                let na = self.nodes[a.0].value.len();
                if self.needs(*a) {
                    for (o, &gi) in acc(grads, *a, na).iter_mut().zip(&g[..na]) {
                        *o += gi;
                    }
                }
                if self.needs(*b) {
                    for (o, &gi) in acc(grads, *b, n - na).iter_mut().zip(&g[na..]) {
                        *o += gi;
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let xv = self.val(*x);
                let wv = self.val(*w);
                let lx = xv.len();
                let lw = wv.len();
                let mut dx = if self.needs(*x) { Some(vec![0.0; lx]) } else { None };
                let mut dw = if self.needs(*w) { Some(vec![0.0; lw]) } else { None };
                kernels::conv2d_backward(xv, wv, g, geom, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    for (o, d) in acc(grads, *x, lx).iter_mut().zip(dx) {
                        *o += d;
                    }
                }
                if let Some(dw) = dw {
                    for (o, d) in acc(grads, *w, lw).iter_mut().zip(dw) {
                        *o += d;
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let len = self.nodes[x.0].value.len();
                let gx = acc(grads, *x, len);
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
            }
            Op::GlobalAvgPool { x, inner } => {
                let len = self.nodes[x.0].value.len();
                let gx = acc(grads, *x, len);
                for (p, &gi) in g.iter().enumerate() {
                    for o in &mut gx[p * inner..(p + 1) * inner] {
                        *o += gi / *inner as f64;
                    }
                }
            }
            Op::Normalize { x, layout, inv_std } => {
                let gc = layout.group_count();
                let m = layout.group_size() as f64;
                let mut gmean = vec![0.0; gc];
                let mut gdot = vec![0.0; gc];
                for i in 0..n {
                    let grp = layout.group_of(i);
                    gmean[grp] += g[i];
                    gdot[grp] += g[i] * y[i];
                }
                let gx = acc(grads, *x, n);
                for i in 0..n {
                    let grp = layout.group_of(i);
                    gx[i] += inv_std[grp] * (g[i] - gmean[grp] / m - y[i] * gdot[grp] / m);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
