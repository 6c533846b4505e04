//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations append nodes in topological order (inputs always precede
//! outputs), each node retaining its forward value. [`Tape::backward`] walks
//! the tape once in reverse from a scalar seed and accumulates a gradient
//! for every recorded value; values the seed does not reach have gradient
//! zero. The tape is single-writer: record and traverse on one thread.
//!
//! Reductions use fixed loop orders throughout, so results are
//! bit-reproducible for a given seed.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::math;
use crate::tensor::Tensor;
use crate::Result;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// Padding scheme for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial extent is `ceil(in / stride)`; the kernel must be odd.
    Same,
    /// No padding; output extent is `(in - kernel) / stride + 1`.
    Valid,
}

/// Elementwise operation selector (unary ops ignore the second operand).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    MaxWithZero,
    Sigmoid,
    Log,
    Exp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    AddConst(ValueId),
    MulConst(ValueId, f64),
    Relu(ValueId),
    Sigmoid(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Matmul(ValueId, ValueId),
    Conv2d {
        input: ValueId,
        weights: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: Padding,
    },
    DepthwiseConv2d {
        input: ValueId,
        weights: ValueId,
        stride: usize,
        padding: Padding,
    },
    BatchNormTrain {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        epsilon: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    BatchNormInfer {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        epsilon: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    GlobalAvgPool(ValueId),
    Reduce {
        input: ValueId,
        axes: Vec<usize>,
        mean: bool,
    },
    Softmax(ValueId),
    AddBias {
        input: ValueId,
        bias: ValueId,
    },
    ScaleChannels {
        input: ValueId,
        gate: ValueId,
    },
    Select {
        input: ValueId,
        index: usize,
    },
    Reshape(ValueId),
    Dropout {
        input: ValueId,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-value gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seed with respect to the value, if it was reached.
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient as a dense tensor; unreached values yield zeros.
    pub fn dense(&self, tape: &Tape, id: ValueId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.nodes[id.0].value.shape()),
        }
    }
}

struct ConvGeom {
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

fn conv_geom(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::invalid(
                    "conv2d",
                    alloc::format!("same padding requires odd kernel extents, got {}x{}", kh, kw),
                ));
            }
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            Ok(ConvGeom {
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::invalid(
                    "conv2d",
                    alloc::format!("input {}x{} smaller than kernel {}x{}", h, w, kh, kw),
                ));
            }
            Ok(ConvGeom {
                out_h: (h - kh) / stride + 1,
                out_w: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
    }
}

/// Output-index range for which `out*stride + offset` lands inside `0..in_extent`.
#[inline]
fn valid_out_range(offset: isize, stride: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_num = in_extent as isize - 1 - offset;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride).min(out_extent.saturating_sub(1));
    if lo > hi {
        (0, 0)
    } else {
        (lo, hi + 1)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded node.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, id: ValueId, op: &'static str) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(op, "value id is not on this tape"))
        }
    }

    /// Records an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_const(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        self.check(a, "add_const")?;
        let v = self.value(a).add_scalar(c);
        Ok(self.push(v, Op::AddConst(a)))
    }

    pub fn mul_const(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        self.check(a, "mul_const")?;
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    /// `max(x, 0)` elementwise.
    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a, "relu")?;
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(v, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a, "sigmoid")?;
        let v = self.value(a).map(math::sigmoid);
        Ok(self.push(v, Op::Sigmoid(a)))
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a, "exp")?;
        let v = self.value(a).map(math::exp);
        Ok(self.push(v, Op::Exp(a)))
    }

    /// Natural logarithm; errors on non-positive inputs.
    pub fn log(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a, "log")?;
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", alloc::format!("log of non-positive value {}", bad)));
        }
        let v = self.value(a).map(math::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    /// `x * sigmoid(x)`, composed from recorded primitives.
    pub fn swish(&mut self, a: ValueId) -> Result<ValueId> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    /// Dispatch by [`ElemOp`]; binary ops require `b`, unary ops reject it.
    pub fn elementwise(&mut self, op: ElemOp, a: ValueId, b: Option<ValueId>) -> Result<ValueId> {
        let need_b = matches!(op, ElemOp::Add | ElemOp::Sub | ElemOp::Mul);
        match (need_b, b) {
            (true, None) => Err(Error::invalid("elementwise", "binary op needs two operands")),
            (false, Some(_)) => Err(Error::invalid("elementwise", "unary op takes one operand")),
            _ => match op {
                ElemOp::Add => self.add(a, b.unwrap()),
                ElemOp::Sub => self.sub(a, b.unwrap()),
                ElemOp::Mul => self.mul(a, b.unwrap()),
                ElemOp::MaxWithZero => self.relu(a),
                ElemOp::Sigmoid => self.sigmoid(a),
                ElemOp::Log => self.log(a),
                ElemOp::Exp => self.exp(a),
            },
        }
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// Sum or mean over `axes` (mean divides by the reduced element count).
    pub fn reduce(&mut self, a: ValueId, axes: &[usize], mean: bool) -> Result<ValueId> {
        self.check(a, "reduce")?;
        let v = self.value(a).reduce(axes, mean)?;
        Ok(self.push(
            v,
            Op::Reduce {
                input: a,
                axes: axes.to_vec(),
                mean,
            },
        ))
    }

    pub fn reduce_sum(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId> {
        self.reduce(a, axes, false)
    }

    pub fn reduce_mean(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId> {
        self.reduce(a, axes, true)
    }

    /// Cross-correlation (no kernel flip) of `input [N,C,H,W]` with
    /// `weights [OC,C,KH,KW]` plus optional `bias [OC]`.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        weights: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: Padding,
    ) -> Result<ValueId> {
        let x = self.value(input);
        let w = self.value(weights);
        let (n, c, h, wd) = match x.shape()[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    alloc::format!("input must be [N,C,H,W], got {:?}", x.shape()),
                ))
            }
        };
        let (oc, wc, kh, kw) = match w.shape()[..] {
            [oc, wc, kh, kw] => (oc, wc, kh, kw),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    alloc::format!("weights must be [OC,C,KH,KW], got {:?}", w.shape()),
                ))
            }
        };
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [oc] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: vec![oc],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = conv_geom(h, wd, kh, kw, stride, padding)?;
        let mut out = vec![0.0; n * oc * geom.out_h * geom.out_w];
        conv2d_forward(
            self.value(input).data(),
            self.value(weights).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
            n,
            c,
            h,
            wd,
            oc,
            kh,
            kw,
            stride,
            &geom,
        );
        let v = Tensor::new(vec![n, oc, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel convolution: `weights [C,KH,KW]`, one kernel per channel.
    pub fn depthwise_conv2d(
        &mut self,
        input: ValueId,
        weights: ValueId,
        stride: usize,
        padding: Padding,
    ) -> Result<ValueId> {
        let x = self.value(input);
        let w = self.value(weights);
        let (n, c, h, wd) = match x.shape()[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::invalid(
                    "depthwise_conv2d",
                    alloc::format!("input must be [N,C,H,W], got {:?}", x.shape()),
                ))
            }
        };
        let (wc, kh, kw) = match w.shape()[..] {
            [wc, kh, kw] => (wc, kh, kw),
            _ => {
                return Err(Error::invalid(
                    "depthwise_conv2d",
                    alloc::format!("weights must be [C,KH,KW], got {:?}", w.shape()),
                ))
            }
        };
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let geom = conv_geom(h, wd, kh, kw, stride, padding)?;
        let mut out = vec![0.0; n * c * geom.out_h * geom.out_w];
        depthwise_forward(
            x.data(),
            w.data(),
            &mut out,
            n,
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            &geom,
        );
        let v = Tensor::new(vec![n, c, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            v,
            Op::DepthwiseConv2d {
                input,
                weights,
                stride,
                padding,
            },
        ))
    }

    /// Train-mode batch normalization over `[N,C,H,W]`; returns the value id
    /// plus the per-channel batch mean and (population) variance so the
    /// caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        epsilon: f64,
    ) -> Result<(ValueId, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.bn_shapes(input, gamma, beta)?;
        let x = self.value(input).data();
        let m = (n * h * w) as f64;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &x[base..base + plane] {
                    s += v;
                }
            }
            let mu = s / m;
            let mut sq = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &x[base..base + plane] {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
        let out = bn_apply(
            x,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
            epsilon,
            n,
            c,
            plane,
        );
        let v = Tensor::new(vec![n, c, h, w], out)?;
        let id = self.push(
            v,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                epsilon,
                mean: mean.clone(),
                var: var.clone(),
            },
        );
        Ok((id, mean, var))
    }

    /// Inference-mode batch normalization using frozen running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
        epsilon: f64,
    ) -> Result<ValueId> {
        let (n, c, h, w) = self.bn_shapes(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid(
                "batch_norm",
                "running statistics length does not match channel count",
            ));
        }
        let plane = h * w;
        let out = bn_apply(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            epsilon,
            n,
            c,
            plane,
        );
        let v = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            v,
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                epsilon,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
            },
        ))
    }

    fn bn_shapes(&self, input: ValueId, gamma: ValueId, beta: ValueId) -> Result<(usize, usize, usize, usize)> {
        let x = self.value(input);
        let (n, c, h, w) = match x.shape()[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::invalid(
                    "batch_norm",
                    alloc::format!("input must be [N,C,H,W], got {:?}", x.shape()),
                ))
            }
        };
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: x.shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        Ok((n, c, h, w))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, a: ValueId) -> Result<ValueId> {
        let x = self.value(a);
        let (n, c, h, w) = match x.shape()[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::invalid(
                    "global_avg_pool",
                    alloc::format!("input must be [N,C,H,W], got {:?}", x.shape()),
                ))
            }
        };
        let plane = h * w;
        let inv = 1.0 / plane as f64;
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            let base = i * plane;
            let mut s = 0.0;
            for &v in &x.data()[base..base + plane] {
                s += v;
            }
            out[i] = s * inv;
        }
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(a)))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let x = self.value(a);
        let rank = x.shape().len();
        if rank == 0 {
            return Err(Error::invalid("softmax", "input must have at least one axis"));
        }
        let k = x.shape()[rank - 1];
        let rows = x.numel() / k;
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[r * k..(r + 1) * k].iter_mut().zip(row.iter()) {
                let e = math::exp(v - max);
                *o = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for o in &mut out[r * k..(r + 1) * k] {
                *o *= inv;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// Adds `bias [F]` to every row of `input [N,F]`.
    pub fn add_bias(&mut self, input: ValueId, bias: ValueId) -> Result<ValueId> {
        let x = self.value(input);
        let b = self.value(bias);
        let (n, f) = match x.shape()[..] {
            [n, f] => (n, f),
            _ => {
                return Err(Error::invalid(
                    "add_bias",
                    alloc::format!("input must be [N,F], got {:?}", x.shape()),
                ))
            }
        };
        if b.shape() != [f] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * f);
        for r in 0..n {
            for j in 0..f {
                out.push(x.data()[r * f + j] + b.data()[j]);
            }
        }
        let v = Tensor::new(vec![n, f], out)?;
        Ok(self.push(v, Op::AddBias { input, bias }))
    }

    /// Multiplies each `[H,W]` plane of `input [N,C,H,W]` by `gate [N,C]`.
    pub fn scale_channels(&mut self, input: ValueId, gate: ValueId) -> Result<ValueId> {
        let x = self.value(input);
        let g = self.value(gate);
        let (n, c, h, w) = match x.shape()[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::invalid(
                    "scale_channels",
                    alloc::format!("input must be [N,C,H,W], got {:?}", x.shape()),
                ))
            }
        };
        if g.shape() != [n, c] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                left: x.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = vec![0.0; x.numel()];
        for i in 0..n * c {
            let gv = g.data()[i];
            let base = i * plane;
            for j in 0..plane {
                out[base + j] = x.data()[base + j] * gv;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::ScaleChannels { input, gate }))
    }

    /// Extracts the scalar at a flat index, shape `[1]`.
    pub fn select(&mut self, input: ValueId, index: usize) -> Result<ValueId> {
        let x = self.value(input);
        if index >= x.numel() {
            return Err(Error::invalid(
                "select",
                alloc::format!("index {} out of range for {} elements", index, x.numel()),
            ));
        }
        let v = Tensor::scalar(x.data()[index]);
        Ok(self.push(v, Op::Select { input, index }))
    }

    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = self.value(input).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(input)))
    }

    /// Multiplies elementwise by a fixed mask (inverted-dropout convention:
    /// entries are `0` or `1/(1-rate)`).
    pub fn dropout(&mut self, input: ValueId, mask: Vec<f64>) -> Result<ValueId> {
        let x = self.value(input);
        if mask.len() != x.numel() {
            return Err(Error::invalid("dropout", "mask length mismatch"));
        }
        let data: Vec<f64> = x.data().iter().zip(mask.iter()).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { input, mask }))
    }

    /// Reverse accumulation from a scalar seed recorded on this tape.
    pub fn backward(&self, seed: ValueId) -> Result<Gradients> {
        if seed.0 >= self.nodes.len() {
            return Err(Error::invalid("backward", "seed is not on this tape"));
        }
        if !self.nodes[seed.0].value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                alloc::format!(
                    "seed must be scalar, got shape {:?}",
                    self.nodes[seed.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(Tensor::ones(self.nodes[seed.0].value.shape()));

        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_maybe_scalar(grads, *a, g, 1.0);
                self.acc_maybe_scalar(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_maybe_scalar(grads, *a, g, 1.0);
                self.acc_maybe_scalar(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // d/da (a*b) = b, d/db = a, with scalar operands reduced by summation.
                let da = if av.is_scalar() && !bv.is_scalar() {
                    let s: f64 = g.iter().zip(bv.iter()).map(|(&x, &y)| x * y).sum();
                    Tensor::scalar(s)
                } else {
                    g.mul(bv)?
                };
                let db = if bv.is_scalar() && !av.is_scalar() {
                    let s: f64 = g.iter().zip(av.iter()).map(|(&x, &y)| x * y).sum();
                    Tensor::scalar(s)
                } else {
                    g.mul(av)?
                };
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddConst(a) => acc(grads, *a, g.clone()),
            Op::MulConst(a, c) => acc(grads, *a, g.scale(*c)),
            Op::Relu(a) => {
                let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g.mul(&mask)?);
            }
            Op::Sigmoid(a) => {
                // y' = y (1 - y), using the stored forward value.
                let y = &node.value;
                let d = y.map(|s| s * (1.0 - s));
                acc(grads, *a, g.mul(&d)?);
            }
            Op::Exp(a) => {
                acc(grads, *a, g.mul(&node.value)?);
            }
            Op::Log(a) => {
                let inv = self.value(*a).map(|x| 1.0 / x);
                acc(grads, *a, g.mul(&inv)?);
            }
            Op::Matmul(a, b) => {
                let at = self.value(*a);
                let bt = self.value(*b);
                acc(grads, *a, g.matmul(&bt.transpose2()?)?);
                acc(grads, *b, at.transpose2()?.matmul(g)?);
            }
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let [n, c, h, wd] = x.shape()[..] else { unreachable!() };
                let [oc, _, kh, kw] = w.shape()[..] else { unreachable!() };
                let geom = conv_geom(h, wd, kh, kw, *stride, *padding)?;
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(w.shape());
                conv2d_backward(
                    x.data(),
                    w.data(),
                    g.data(),
                    dx.data_mut(),
                    dw.data_mut(),
                    n,
                    c,
                    h,
                    wd,
                    oc,
                    kh,
                    kw,
                    *stride,
                    &geom,
                );
                acc(grads, *input, dx);
                acc(grads, *weights, dw);
                if let Some(b) = bias {
                    let mut db = vec![0.0; oc];
                    let plane = geom.out_h * geom.out_w;
                    for bi in 0..n {
                        for o in 0..oc {
                            let base = (bi * oc + o) * plane;
                            for &gv in &g.data()[base..base + plane] {
                                db[o] += gv;
                            }
                        }
                    }
                    acc(grads, *b, Tensor::new(vec![oc], db)?);
                }
            }
            Op::DepthwiseConv2d {
                input,
                weights,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let [n, c, h, wd] = x.shape()[..] else { unreachable!() };
                let [_, kh, kw] = w.shape()[..] else { unreachable!() };
                let geom = conv_geom(h, wd, kh, kw, *stride, *padding)?;
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(w.shape());
                depthwise_backward(
                    x.data(),
                    w.data(),
                    g.data(),
                    dx.data_mut(),
                    dw.data_mut(),
                    n,
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    *stride,
                    &geom,
                );
                acc(grads, *input, dx);
                acc(grads, *weights, dw);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                epsilon,
                mean,
                var,
            } => {
                let x = self.value(*input);
                let gm = self.value(*gamma);
                let [n, c, h, w] = x.shape()[..] else { unreachable!() };
                let plane = h * w;
                let m = (n * plane) as f64;
                let mut dx = Tensor::zeros(x.shape());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let inv_std = 1.0 / math::sqrt(var[ch] + epsilon);
                    let mu = mean[ch];
                    let gch = gm.data()[ch];
                    // First pass: channel sums of dxhat and dxhat*xhat.
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    let mut dg = 0.0;
                    let mut db = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for j in 0..plane {
                            let gv = g.data()[base + j];
                            let xhat = (x.data()[base + j] - mu) * inv_std;
                            db += gv;
                            dg += gv * xhat;
                            let dxhat = gv * gch;
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                        }
                    }
                    dgamma[ch] = dg;
                    dbeta[ch] = db;
                    let s1m = s1 / m;
                    let s2m = s2 / m;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for j in 0..plane {
                            let gv = g.data()[base + j];
                            let xhat = (x.data()[base + j] - mu) * inv_std;
                            let dxhat = gv * gch;
                            dx.data_mut()[base + j] = inv_std * (dxhat - s1m - xhat * s2m);
                        }
                    }
                }
                acc(grads, *input, dx);
                acc(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                acc(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                epsilon,
                mean,
                var,
            } => {
                let x = self.value(*input);
                let gm = self.value(*gamma);
                let [n, c, h, w] = x.shape()[..] else { unreachable!() };
                let plane = h * w;
                let mut dx = Tensor::zeros(x.shape());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let inv_std = 1.0 / math::sqrt(var[ch] + epsilon);
                    let mu = mean[ch];
                    let scale = gm.data()[ch] * inv_std;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for j in 0..plane {
                            let gv = g.data()[base + j];
                            dbeta[ch] += gv;
                            dgamma[ch] += gv * (x.data()[base + j] - mu) * inv_std;
                            dx.data_mut()[base + j] = gv * scale;
                        }
                    }
                }
                acc(grads, *input, dx);
                acc(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                acc(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::GlobalAvgPool(a) => {
                let x = self.value(*a);
                let [n, c, h, w] = x.shape()[..] else { unreachable!() };
                let plane = h * w;
                let inv = 1.0 / plane as f64;
                let mut dx = Tensor::zeros(x.shape());
                for i in 0..n * c {
                    let gv = g.data()[i] * inv;
                    let base = i * plane;
                    for j in 0..plane {
                        dx.data_mut()[base + j] = gv;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::Reduce { input, axes, mean } => {
                let x = self.value(*input);
                let rank = x.shape().len();
                let mut reduced = vec![false; rank];
                for &a in axes {
                    reduced[a] = true;
                }
                let count: usize = (0..rank).filter(|d| reduced[*d]).map(|d| x.shape()[d]).product();
                let scale = if *mean { 1.0 / count as f64 } else { 1.0 };
                // Rebuild the same input-flat -> output-flat mapping as the forward pass.
                let mut in_strides = vec![1usize; rank];
                for d in (0..rank.saturating_sub(1)).rev() {
                    in_strides[d] = in_strides[d + 1] * x.shape()[d + 1];
                }
                let mut out_strides = vec![0usize; rank];
                let mut acc_s = 1usize;
                for d in (0..rank).rev() {
                    if !reduced[d] {
                        out_strides[d] = acc_s;
                        acc_s *= x.shape()[d];
                    }
                }
                let mut dx = Tensor::zeros(x.shape());
                for flat in 0..x.numel() {
                    let mut rem = flat;
                    let mut out_flat = 0usize;
                    for d in 0..rank {
                        let id = rem / in_strides[d];
                        rem %= in_strides[d];
                        if !reduced[d] {
                            out_flat += id * out_strides[d];
                        }
                    }
                    dx.data_mut()[flat] = g.data()[out_flat] * scale;
                }
                acc(grads, *input, dx);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let rank = p.shape().len();
                let k = p.shape()[rank - 1];
                let rows = p.numel() / k;
                let mut dx = Tensor::zeros(p.shape());
                for r in 0..rows {
                    let pr = &p.data()[r * k..(r + 1) * k];
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let dot: f64 = pr.iter().zip(gr.iter()).map(|(&pv, &gv)| pv * gv).sum();
                    for j in 0..k {
                        dx.data_mut()[r * k + j] = pr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, dx);
            }
            Op::AddBias { input, bias } => {
                let [n, f] = self.value(*input).shape()[..] else { unreachable!() };
                acc(grads, *input, g.clone());
                let mut db = vec![0.0; f];
                for r in 0..n {
                    for j in 0..f {
                        db[j] += g.data()[r * f + j];
                    }
                }
                acc(grads, *bias, Tensor::new(vec![f], db)?);
            }
            Op::ScaleChannels { input, gate } => {
                let x = self.value(*input);
                let gt = self.value(*gate);
                let [n, c, h, w] = x.shape()[..] else { unreachable!() };
                let plane = h * w;
                let mut dx = Tensor::zeros(x.shape());
                let mut dg = vec![0.0; n * c];
                for i in 0..n * c {
                    let gv = gt.data()[i];
                    let base = i * plane;
                    let mut s = 0.0;
                    for j in 0..plane {
                        dx.data_mut()[base + j] = g.data()[base + j] * gv;
                        s += g.data()[base + j] * x.data()[base + j];
                    }
                    dg[i] = s;
                }
                acc(grads, *input, dx);
                acc(grads, *gate, Tensor::new(vec![n, c], dg)?);
            }
            Op::Select { input, index } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                dx.data_mut()[*index] = g.data()[0];
                acc(grads, *input, dx);
            }
            Op::Reshape(a) => {
                let dx = g.reshape(self.value(*a).shape())?;
                acc(grads, *a, dx);
            }
            Op::Dropout { input, mask } => {
                let data: Vec<f64> = g.iter().zip(mask.iter()).map(|(&gv, &m)| gv * m).collect();
                acc(grads, *input, Tensor::new(g.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    /// Accumulates `g * sign` into `target`, summing when the target is a
    /// scalar standing against a non-scalar counterpart.
    fn acc_maybe_scalar(&self, grads: &mut [Option<Tensor>], target: ValueId, g: &Tensor, sign: f64) {
        let tv = self.value(target);
        let delta = if tv.is_scalar() && !g.is_scalar() {
            Tensor::scalar(g.iter().sum::<f64>() * sign)
        } else if sign == 1.0 {
            g.clone()
        } else {
            g.scale(sign)
        };
        acc(grads, target, delta);
    }
}

fn acc(grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.iter()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn bn_apply(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    epsilon: f64,
    n: usize,
    c: usize,
    plane: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let inv_std = 1.0 / math::sqrt(var[ch] + epsilon);
        let scale = gamma[ch] * inv_std;
        let shift = beta[ch] - mean[ch] * scale;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for j in 0..plane {
                out[base + j] = x[base + j] * scale + shift;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geom: &ConvGeom,
) {
    let (oh, ow) = (geom.out_h, geom.out_w);
    let oplane = oh * ow;
    let iplane = h * wd;
    for b in 0..n {
        for o in 0..oc {
            let obase = (b * oc + o) * oplane;
            if let Some(bias) = bias {
                for v in &mut out[obase..obase + oplane] {
                    *v = bias[o];
                }
            }
            for ic in 0..c {
                let ibase = (b * c + ic) * iplane;
                for ky in 0..kh {
                    let yoff = ky as isize - geom.pad_top as isize;
                    let (ylo, yhi) = valid_out_range(yoff, stride, h, oh);
                    for kx in 0..kw {
                        let wv = w[((o * c + ic) * kh + ky) * kw + kx];
                        let xoff = kx as isize - geom.pad_left as isize;
                        let (xlo, xhi) = valid_out_range(xoff, stride, wd, ow);
                        for oy in ylo..yhi {
                            let iy = (oy * stride) as isize + yoff;
                            let irow = ibase + iy as usize * wd;
                            let orow = obase + oy * ow;
                            for ox in xlo..xhi {
                                let ix = (ox * stride) as isize + xoff;
                                out[orow + ox] += wv * x[irow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geom: &ConvGeom,
) {
    let (oh, ow) = (geom.out_h, geom.out_w);
    let oplane = oh * ow;
    let iplane = h * wd;
    for b in 0..n {
        for o in 0..oc {
            let obase = (b * oc + o) * oplane;
            for ic in 0..c {
                let ibase = (b * c + ic) * iplane;
                for ky in 0..kh {
                    let yoff = ky as isize - geom.pad_top as isize;
                    let (ylo, yhi) = valid_out_range(yoff, stride, h, oh);
                    for kx in 0..kw {
                        let widx = ((o * c + ic) * kh + ky) * kw + kx;
                        let wv = w[widx];
                        let xoff = kx as isize - geom.pad_left as isize;
                        let (xlo, xhi) = valid_out_range(xoff, stride, wd, ow);
                        let mut wacc = 0.0;
                        for oy in ylo..yhi {
                            let iy = (oy * stride) as isize + yoff;
                            let irow = ibase + iy as usize * wd;
                            let orow = obase + oy * ow;
                            for ox in xlo..xhi {
                                let ix = (irow as isize + (ox * stride) as isize + xoff) as usize;
                                let gv = gout[orow + ox];
                                dx[ix] += wv * gv;
                                wacc += x[ix] * gv;
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geom: &ConvGeom,
) {
    let (oh, ow) = (geom.out_h, geom.out_w);
    let oplane = oh * ow;
    let iplane = h * wd;
    for b in 0..n {
        for ch in 0..c {
            let obase = (b * c + ch) * oplane;
            let ibase = (b * c + ch) * iplane;
            for ky in 0..kh {
                let yoff = ky as isize - geom.pad_top as isize;
                let (ylo, yhi) = valid_out_range(yoff, stride, h, oh);
                for kx in 0..kw {
                    let wv = w[(ch * kh + ky) * kw + kx];
                    let xoff = kx as isize - geom.pad_left as isize;
                    let (xlo, xhi) = valid_out_range(xoff, stride, wd, ow);
                    for oy in ylo..yhi {
                        let iy = (oy * stride) as isize + yoff;
                        let irow = ibase + iy as usize * wd;
                        let orow = obase + oy * ow;
                        for ox in xlo..xhi {
                            let ix = (ox * stride) as isize + xoff;
                            out[orow + ox] += wv * x[irow + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geom: &ConvGeom,
) {
    let (oh, ow) = (geom.out_h, geom.out_w);
    let oplane = oh * ow;
    let iplane = h * wd;
    for b in 0..n {
        for ch in 0..c {
            let obase = (b * c + ch) * oplane;
            let ibase = (b * c + ch) * iplane;
            for ky in 0..kh {
                let yoff = ky as isize - geom.pad_top as isize;
                let (ylo, yhi) = valid_out_range(yoff, stride, h, oh);
                for kx in 0..kw {
                    let widx = (ch * kh + ky) * kw + kx;
                    let wv = w[widx];
                    let xoff = kx as isize - geom.pad_left as isize;
                    let (xlo, xhi) = valid_out_range(xoff, stride, wd, ow);
                    let mut wacc = 0.0;
                    for oy in ylo..yhi {
                        let iy = (oy * stride) as isize + yoff;
                        let irow = ibase + iy as usize * wd;
                        let orow = obase + oy * ow;
                        for ox in xlo..xhi {
                            let ix = (irow as isize + (ox * stride) as isize + xoff) as usize;
                            let gv = gout[orow + ox];
                            dx[ix] += wv * gv;
                            wacc += x[ix] * gv;
                        }
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of a tensor-to-scalar function `f` at `x`.
///
/// The error for each component is `|ad - cd| / (|cd| + 1e-12)`. `f` must be
/// deterministic; non-finite intermediates are reported as errors.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    if step <= 0.0 {
        return Err(Error::invalid("gradient_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let y = f(&mut tape, xid)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::invalid("gradient_check", "f must produce a scalar"));
    }
    if !tape.value(y).all_finite() {
        return Err(Error::NonFinite {
            context: alloc::string::String::from("gradient_check forward value"),
        });
    }
    let grads = tape.backward(y)?;
    let ad = grads.dense(&tape, xid);
    if !ad.all_finite() {
        return Err(Error::NonFinite {
            context: alloc::string::String::from("gradient_check reverse-mode gradient"),
        });
    }

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut t, id)?;
        let v = t.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: alloc::string::String::from("gradient_check finite-difference probe"),
            });
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        if !cd.is_finite() {
            return Err(Error::NonFinite {
                context: alloc::string::String::from("gradient_check central difference"),
            });
        }
        let err = (ad.data()[i] - cd).abs() / (cd.abs() + 1e-12);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.elementwise(ElemOp::MaxWithZero, x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
        assert!((tape.value(y).data()[1] - 0.7310586).abs() < 1e-7);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.reduce_sum(sq, &[0]).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.dense(&tape, x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_constant_leaves_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = tape.leaf(Tensor::scalar(5.0));
        let grads = tape.backward(c).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.dense(&tape, x).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_off_tape_seed() {
        let tape = Tape::new();
        assert!(tape.backward(ValueId(3)).is_err());
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = SplitMix64::new(31);
        let data: Vec<f64> = (0..9).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let b = Tensor::new(vec![3, 3], (0..9).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
        let c = Tensor::new(vec![3, 3], (0..9).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
        let x = Tensor::new(vec![3, 3], data).unwrap();
        let err = gradient_check(
            |tape, xid| {
                let bid = tape.leaf(b.clone());
                let cid = tape.leaf(c.clone());
                let m1 = tape.matmul(xid, bid)?;
                let m2 = tape.matmul(m1, cid)?;
                tape.reduce_sum(m2, &[0, 1])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn gradient_check_linear_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = gradient_check(|tape, xid| tape.reduce_sum(xid, &[0]), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "relative error {}", err);
    }

    #[test]
    fn gradient_check_sigmoid_sum() {
        let mut rng = SplitMix64::new(7);
        let x = Tensor::new(vec![6], (0..6).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
        let err = gradient_check(
            |tape, xid| {
                let s = tape.sigmoid(xid)?;
                tape.reduce_sum(s, &[0])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {}", err);
    }

    #[test]
    fn gradient_check_rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(gradient_check(|tape, xid| tape.reduce_sum(xid, &[0]), &x, 0.0).is_err());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, w, None, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_ones_same_padding_overlap_counts() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, Padding::Same).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv2d_zero_weights_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 5, 5], 1.7));
        let w = tape.leaf(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, Padding::Same).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_channel_mismatch_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[2, 4, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, None, 1, Padding::Same),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv2d_same_padding_preserves_extent_for_odd_kernels() {
        for k in [1usize, 3, 5, 7] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::zeros(&[1, 1, 9, 9]));
            let w = tape.leaf(Tensor::zeros(&[1, 1, k, k]));
            let y = tape.conv2d(x, w, None, 1, Padding::Same).unwrap();
            assert_eq!(tape.value(y).shape(), &[1, 1, 9, 9]);
        }
    }

    #[test]
    fn conv2d_even_kernel_same_padding_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.conv2d(x, w, None, 1, Padding::Same).is_err());
    }

    #[test]
    fn conv2d_stride_two_halves_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn depthwise_scalar_kernel_scales_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap());
        let w = tape.leaf(Tensor::full(&[2, 1, 1], 2.0));
        let y = tape.depthwise_conv2d(x, w, 1, Padding::Same).unwrap();
        let expect: Vec<f64> = (1..=8).map(|v| f64::from(v) * 2.0).collect();
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 3, 3]));
        let mut wdata = vec![0.0; 2 * 9];
        for v in wdata.iter_mut().skip(9) {
            *v = 1.0;
        }
        let w = tape.leaf(Tensor::new(vec![2, 3, 3], wdata).unwrap());
        let y = tape.depthwise_conv2d(x, w, 1, Padding::Same).unwrap();
        let out = tape.value(y).data();
        assert!(out[..9].iter().all(|&v| v == 0.0));
        assert_eq!(&out[9..], &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn depthwise_kernel_count_mismatch_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[2, 3, 3]));
        assert!(tape.depthwise_conv2d(x, w, 1, Padding::Same).is_err());
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let p = tape.softmax(x).unwrap();
        for &v in tape.value(p).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.leaf(Tensor::new(vec![1, 3], vec![7.25, 7.25, 7.25]).unwrap());
        let q = tape.softmax(y).unwrap();
        for &v in tape.value(q).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![2.0, 0.0, 0.0]).unwrap());
        let p = tape.softmax(x).unwrap();
        let out = tape.value(p).data();
        assert!((out[0] - 0.7869860).abs() < 1e-7);
        assert!((out[1] - 0.1065070).abs() < 1e-7);
        assert!((out[2] - 0.1065070).abs() < 1e-7);
    }

    #[test]
    fn global_avg_pool_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn select_and_its_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.select(x, 2).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 3.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.dense(&tape, x).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn swish_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0, 1.0, -20.0]).unwrap());
        let y = tape.swish(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.7310586).abs() < 1e-7);
        assert!((out[2] - (-4.122307e-8)).abs() < 1e-12);
    }
}
