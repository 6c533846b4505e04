//! Network layers and the MBConv block.
//!
//! Layers are plain data (name + parameter tensors). A forward pass records
//! operations onto a [`Tape`] through [`Layer::forward`]; every named layer
//! (including the sub-layers of an MBConv block) pushes its output into the
//! [`ForwardCtx`] trace, which is what activation recording and GradCAM
//! consume. Batch-norm running statistics are never mutated during a
//! forward pass; train mode reports batch statistics through the context
//! and the training loop applies them explicitly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::SplitMix64;
use crate::tape::{Padding, Tape, ValueId};
use crate::tensor::Tensor;
use crate::Result;

/// Whether a forward pass normalizes with batch statistics (`Train`) or
/// frozen running statistics (`Infer`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-pass state threaded through layer forwards.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    /// Randomness for dropout masks; required only when a dropout layer
    /// runs in train mode.
    pub rng: Option<&'a mut SplitMix64>,
    /// Named layer outputs in execution order.
    pub trace: Vec<(String, ValueId)>,
    /// Train-mode batch statistics per batch-norm layer: (name, mean, var).
    pub bn_batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
    /// Parameter leaf ids, in the same order as `Network::visit_params`.
    pub param_ids: Vec<ValueId>,
}

impl<'a> ForwardCtx<'a> {
    pub fn infer() -> Self {
        ForwardCtx {
            mode: Mode::Infer,
            rng: None,
            trace: Vec::new(),
            bn_batch_stats: Vec::new(),
            param_ids: Vec::new(),
        }
    }

    pub fn train(rng: &'a mut SplitMix64) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng: Some(rng),
            trace: Vec::new(),
            bn_batch_stats: Vec::new(),
            param_ids: Vec::new(),
        }
    }

    fn record(&mut self, name: &str, id: ValueId) {
        self.trace.push((String::from(name), id));
    }

    fn leaf_param(&mut self, tape: &mut Tape, tensor: &Tensor) -> ValueId {
        let id = tape.leaf(tensor.clone());
        self.param_ids.push(id);
        id
    }
}

/// Configuration of one mobile inverted bottleneck block.
#[derive(Debug, Clone, PartialEq)]
pub struct MBConvConfig {
    pub expansion: f64,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub se_ratio: f64,
}

impl MBConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expansion <= 0.0 {
            return Err(Error::invalid("mbconv", "expansion must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("mbconv", "kernel must be odd"));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::invalid(
                "mbconv",
                format!("stride must be 1 or 2, got {}", self.stride),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("mbconv", "channel counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.se_ratio) {
            return Err(Error::invalid("mbconv", "se_ratio must lie in [0,1]"));
        }
        Ok(())
    }

    /// The residual skip is active iff stride is 1 and channels are preserved.
    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    /// Channel count after pointwise expansion.
    pub fn expanded_channels(&self) -> usize {
        crate::math::ceil(self.expansion * self.in_channels as f64) as usize
    }
}

fn he_truncated(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let sigma = crate::math::sqrt(2.0 / fan_in as f64);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.next_normal_truncated(sigma)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Tensor {
    let limit = crate::math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.range_f64(-limit, limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// 2-D convolution layer (cross-correlation, no kernel flip).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dLayer {
    pub fn new(
        name: impl Into<String>,
        weights: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [out_ch, _, kh, kw] = weights.shape()[..] else {
            return Err(Error::invalid("conv2d", "weights must be [OC,IC,KH,KW]"));
        };
        if out_ch == 0 {
            return Err(Error::invalid("conv2d", "out_ch must be at least 1"));
        }
        if padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::invalid("conv2d", "same padding requires odd kernels"));
        }
        Ok(Conv2dLayer {
            name: name.into(),
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn init(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weights = he_truncated(&[out_ch, in_ch, kernel, kernel], fan_in, rng);
        Self::new(name, weights, None, stride, padding)
    }
}

/// Depthwise convolution: one kernel per input channel.
#[derive(Debug, Clone)]
pub struct DepthwiseLayer {
    pub name: String,
    pub weights: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl DepthwiseLayer {
    pub fn init(
        name: impl Into<String>,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut SplitMix64,
    ) -> Self {
        let weights = he_truncated(&[channels, kernel, kernel], kernel * kernel, rng);
        DepthwiseLayer {
            name: name.into(),
            weights,
            stride,
            padding,
        }
    }
}

/// Batch normalization state. The mode (batch vs running statistics) comes
/// from the [`ForwardCtx`] at forward time.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

impl BatchNormLayer {
    pub fn init(name: impl Into<String>, channels: usize) -> Self {
        BatchNormLayer {
            name: name.into(),
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean.iter()) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var.iter()) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    fn forward(&self, tape: &mut Tape, input: ValueId, ctx: &mut ForwardCtx) -> Result<ValueId> {
        let gamma = ctx.leaf_param(tape, &self.gamma);
        let beta = ctx.leaf_param(tape, &self.beta);
        let out = match ctx.mode {
            Mode::Train => {
                let (id, mean, var) = tape.batch_norm_train(input, gamma, beta, self.epsilon)?;
                ctx.bn_batch_stats.push((self.name.clone(), mean, var));
                id
            }
            Mode::Infer => tape.batch_norm_infer(
                input,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.epsilon,
            )?,
        };
        ctx.record(&self.name, out);
        Ok(out)
    }
}

/// Squeeze-and-excitation gate: global pool, bottleneck MLP, sigmoid gate.
#[derive(Debug, Clone)]
pub struct SqueezeExciteLayer {
    pub name: String,
    pub w_reduce: Tensor,
    pub b_reduce: Tensor,
    pub w_expand: Tensor,
    pub b_expand: Tensor,
}

impl SqueezeExciteLayer {
    /// Reduced width from the operating channel count and a ratio in `(0,1]`.
    pub fn reduced_width(channels: usize, ratio: f64) -> usize {
        crate::math::ceil(channels as f64 * ratio).max(1.0) as usize
    }

    pub fn init(name: impl Into<String>, channels: usize, reduced: usize, rng: &mut SplitMix64) -> Self {
        SqueezeExciteLayer {
            name: name.into(),
            w_reduce: glorot_uniform(&[channels, reduced], channels, reduced, rng),
            b_reduce: Tensor::zeros(&[reduced]),
            w_expand: glorot_uniform(&[reduced, channels], reduced, channels, rng),
            b_expand: Tensor::zeros(&[channels]),
        }
    }

    fn forward(&self, tape: &mut Tape, input: ValueId, ctx: &mut ForwardCtx) -> Result<ValueId> {
        let w1 = ctx.leaf_param(tape, &self.w_reduce);
        let b1 = ctx.leaf_param(tape, &self.b_reduce);
        let w2 = ctx.leaf_param(tape, &self.w_expand);
        let b2 = ctx.leaf_param(tape, &self.b_expand);
        let pooled = tape.global_avg_pool(input)?;
        let h = tape.matmul(pooled, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.swish(h)?;
        let h = tape.matmul(h, w2)?;
        let h = tape.add_bias(h, b2)?;
        let gate = tape.sigmoid(h)?;
        let out = tape.scale_channels(input, gate)?;
        ctx.record(&self.name, out);
        Ok(out)
    }
}

/// Fully connected layer over `[N, IN]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub name: String,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl DenseLayer {
    pub fn init(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        DenseLayer {
            name: name.into(),
            weights: glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, rng),
            bias: Some(Tensor::zeros(&[fan_out])),
        }
    }
}

/// Mobile inverted bottleneck: expand, depthwise, squeeze-excite, project,
/// with a residual skip when stride is 1 and channels are preserved.
#[derive(Debug, Clone)]
pub struct MBConvBlock {
    pub name: String,
    pub config: MBConvConfig,
    pub expand: Option<(Conv2dLayer, BatchNormLayer)>,
    pub depthwise: DepthwiseLayer,
    pub dw_norm: BatchNormLayer,
    pub se: Option<SqueezeExciteLayer>,
    pub project: Conv2dLayer,
    pub project_norm: BatchNormLayer,
}

impl MBConvBlock {
    pub fn init(name: impl Into<String>, config: MBConvConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let name = name.into();
        let expanded = config.expanded_channels();
        let expand = if config.expansion == 1.0 {
            None
        } else {
            Some((
                Conv2dLayer::init(
                    format!("{name}.expand_conv"),
                    config.in_channels,
                    expanded,
                    1,
                    1,
                    Padding::Same,
                    rng,
                )?,
                BatchNormLayer::init(format!("{name}.expand_bn"), expanded),
            ))
        };
        let dw_channels = if config.expansion == 1.0 {
            config.in_channels
        } else {
            expanded
        };
        let depthwise = DepthwiseLayer::init(
            format!("{name}.dw_conv"),
            dw_channels,
            config.kernel,
            config.stride,
            Padding::Same,
            rng,
        );
        let dw_norm = BatchNormLayer::init(format!("{name}.dw_bn"), dw_channels);
        let se = if config.se_ratio > 0.0 {
            // Reduction width follows the block's input channels.
            let reduced = SqueezeExciteLayer::reduced_width(config.in_channels, config.se_ratio);
            Some(SqueezeExciteLayer::init(
                format!("{name}.se"),
                dw_channels,
                reduced,
                rng,
            ))
        } else {
            None
        };
        let project = Conv2dLayer::init(
            format!("{name}.project_conv"),
            dw_channels,
            config.out_channels,
            1,
            1,
            Padding::Same,
            rng,
        )?;
        let project_norm = BatchNormLayer::init(format!("{name}.project_bn"), config.out_channels);
        Ok(MBConvBlock {
            name,
            config,
            expand,
            depthwise,
            dw_norm,
            se,
            project,
            project_norm,
        })
    }

    fn forward(&self, tape: &mut Tape, input: ValueId, ctx: &mut ForwardCtx) -> Result<ValueId> {
        let mut h = input;
        if let Some((conv, bn)) = &self.expand {
            h = conv_forward(conv, tape, h, ctx)?;
            h = bn.forward(tape, h, ctx)?;
            h = swish_forward(&format!("{}.expand_swish", self.name), tape, h, ctx)?;
        }
        h = depthwise_forward(&self.depthwise, tape, h, ctx)?;
        h = self.dw_norm.forward(tape, h, ctx)?;
        h = swish_forward(&format!("{}.dw_swish", self.name), tape, h, ctx)?;
        if let Some(se) = &self.se {
            h = se.forward(tape, h, ctx)?;
        }
        h = conv_forward(&self.project, tape, h, ctx)?;
        h = self.project_norm.forward(tape, h, ctx)?;
        let out = if self.config.has_skip() {
            tape.add(h, input)?
        } else {
            h
        };
        ctx.record(&self.name, out);
        Ok(out)
    }
}

fn conv_forward(layer: &Conv2dLayer, tape: &mut Tape, input: ValueId, ctx: &mut ForwardCtx) -> Result<ValueId> {
    let w = ctx.leaf_param(tape, &layer.weights);
    let b = layer.bias.as_ref().map(|b| ctx.leaf_param(tape, b));
    let out = tape.conv2d(input, w, b, layer.stride, layer.padding)?;
    ctx.record(&layer.name, out);
    Ok(out)
}

fn depthwise_forward(
    layer: &DepthwiseLayer,
    tape: &mut Tape,
    input: ValueId,
    ctx: &mut ForwardCtx,
) -> Result<ValueId> {
    let w = ctx.leaf_param(tape, &layer.weights);
    let out = tape.depthwise_conv2d(input, w, layer.stride, layer.padding)?;
    ctx.record(&layer.name, out);
    Ok(out)
}

fn swish_forward(name: &str, tape: &mut Tape, input: ValueId, ctx: &mut ForwardCtx) -> Result<ValueId> {
    let out = tape.swish(input)?;
    ctx.record(name, out);
    Ok(out)
}

/// One network layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2dLayer),
    Depthwise(DepthwiseLayer),
    BatchNorm(BatchNormLayer),
    Swish { name: String },
    SqueezeExcite(SqueezeExciteLayer),
    GlobalAvgPool { name: String },
    Dense(DenseLayer),
    Softmax { name: String },
    Dropout { name: String, rate: f64 },
    MBConv(MBConvBlock),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.name,
            Layer::Depthwise(l) => &l.name,
            Layer::BatchNorm(l) => &l.name,
            Layer::Swish { name } => name,
            Layer::SqueezeExcite(l) => &l.name,
            Layer::GlobalAvgPool { name } => name,
            Layer::Dense(l) => &l.name,
            Layer::Softmax { name } => name,
            Layer::Dropout { name, .. } => name,
            Layer::MBConv(b) => &b.name,
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: ValueId, ctx: &mut ForwardCtx) -> Result<ValueId> {
        match self {
            Layer::Conv(l) => conv_forward(l, tape, input, ctx),
            Layer::Depthwise(l) => depthwise_forward(l, tape, input, ctx),
            Layer::BatchNorm(l) => l.forward(tape, input, ctx),
            Layer::Swish { name } => swish_forward(name, tape, input, ctx),
            Layer::SqueezeExcite(l) => l.forward(tape, input, ctx),
            Layer::GlobalAvgPool { name } => {
                let out = tape.global_avg_pool(input)?;
                ctx.record(name, out);
                Ok(out)
            }
            Layer::Dense(l) => {
                let w = ctx.leaf_param(tape, &l.weights);
                let mut out = tape.matmul(input, w)?;
                if let Some(b) = &l.bias {
                    let bid = ctx.leaf_param(tape, b);
                    out = tape.add_bias(out, bid)?;
                }
                ctx.record(&l.name, out);
                Ok(out)
            }
            Layer::Softmax { name } => {
                let out = tape.softmax(input)?;
                ctx.record(name, out);
                Ok(out)
            }
            Layer::Dropout { name, rate } => {
                let out = match ctx.mode {
                    Mode::Infer => input,
                    Mode::Train => {
                        if *rate == 0.0 {
                            input
                        } else {
                            let keep = 1.0 - rate;
                            let rng = ctx.rng.as_deref_mut().ok_or_else(|| {
                                Error::invalid("dropout", "train-mode dropout needs an rng")
                            })?;
                            let n = tape.value(input).numel();
                            let mask: Vec<f64> = (0..n)
                                .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                                .collect();
                            tape.dropout(input, mask)?
                        }
                    }
                };
                ctx.record(name, out);
                Ok(out)
            }
            Layer::MBConv(b) => b.forward(tape, input, ctx),
        }
    }

    /// Trainable parameters in registration order (the exact order the
    /// forward pass records leaves).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect(false, &mut out);
        out
    }

    /// All persistent tensors: trainable parameters plus batch-norm running
    /// statistics, in registration order. This is the checkpoint layout.
    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect(true, &mut out);
        out
    }

    fn collect<'a>(&'a self, with_running: bool, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Layer::Conv(l) => {
                out.push((format!("{}.weights", l.name), &l.weights));
                if let Some(b) = &l.bias {
                    out.push((format!("{}.bias", l.name), b));
                }
            }
            Layer::Depthwise(l) => out.push((format!("{}.weights", l.name), &l.weights)),
            Layer::BatchNorm(l) => collect_bn(l, with_running, out),
            Layer::SqueezeExcite(l) => collect_se(l, out),
            Layer::Dense(l) => {
                out.push((format!("{}.weights", l.name), &l.weights));
                if let Some(b) = &l.bias {
                    out.push((format!("{}.bias", l.name), b));
                }
            }
            Layer::MBConv(b) => {
                // Mirrors MBConvBlock::forward registration order exactly.
                if let Some((conv, bn)) = &b.expand {
                    out.push((format!("{}.weights", conv.name), &conv.weights));
                    collect_bn(bn, with_running, out);
                }
                out.push((format!("{}.weights", b.depthwise.name), &b.depthwise.weights));
                collect_bn(&b.dw_norm, with_running, out);
                if let Some(se) = &b.se {
                    collect_se(se, out);
                }
                out.push((format!("{}.weights", b.project.name), &b.project.weights));
                collect_bn(&b.project_norm, with_running, out);
            }
            Layer::Swish { .. } | Layer::GlobalAvgPool { .. } | Layer::Softmax { .. } | Layer::Dropout { .. } => {}
        }
    }

    /// Mutable counterpart of [`Layer::params`], same order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.collect_mut(false, &mut out);
        out
    }

    /// Mutable counterpart of [`Layer::state`], same order.
    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.collect_mut(true, &mut out);
        out
    }

    fn collect_mut<'a>(&'a mut self, with_running: bool, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Layer::Conv(l) => {
                out.push(&mut l.weights);
                if let Some(b) = &mut l.bias {
                    out.push(b);
                }
            }
            Layer::Depthwise(l) => out.push(&mut l.weights),
            Layer::BatchNorm(l) => collect_bn_mut(l, with_running, out),
            Layer::SqueezeExcite(l) => collect_se_mut(l, out),
            Layer::Dense(l) => {
                out.push(&mut l.weights);
                if let Some(b) = &mut l.bias {
                    out.push(b);
                }
            }
            Layer::MBConv(b) => {
                if let Some((conv, bn)) = &mut b.expand {
                    out.push(&mut conv.weights);
                    collect_bn_mut(bn, with_running, out);
                }
                out.push(&mut b.depthwise.weights);
                collect_bn_mut(&mut b.dw_norm, with_running, out);
                if let Some(se) = &mut b.se {
                    collect_se_mut(se, out);
                }
                out.push(&mut b.project.weights);
                collect_bn_mut(&mut b.project_norm, with_running, out);
            }
            Layer::Swish { .. } | Layer::GlobalAvgPool { .. } | Layer::Softmax { .. } | Layer::Dropout { .. } => {}
        }
    }

    /// Visits every batch-norm layer (for running-statistics updates).
    pub fn visit_bn_mut(&mut self, f: &mut impl FnMut(&mut BatchNormLayer)) {
        match self {
            Layer::BatchNorm(l) => f(l),
            Layer::MBConv(b) => {
                if let Some((_, bn)) = &mut b.expand {
                    f(bn);
                }
                f(&mut b.dw_norm);
                f(&mut b.project_norm);
            }
            _ => {}
        }
    }
}

fn collect_bn<'a>(l: &'a BatchNormLayer, with_running: bool, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{}.gamma", l.name), &l.gamma));
    out.push((format!("{}.beta", l.name), &l.beta));
    if with_running {
        out.push((format!("{}.running_mean", l.name), &l.running_mean));
        out.push((format!("{}.running_var", l.name), &l.running_var));
    }
}

fn collect_bn_mut<'a>(l: &'a mut BatchNormLayer, with_running: bool, out: &mut Vec<&'a mut Tensor>) {
    out.push(&mut l.gamma);
    out.push(&mut l.beta);
    if with_running {
        out.push(&mut l.running_mean);
        out.push(&mut l.running_var);
    }
}

fn collect_se<'a>(l: &'a SqueezeExciteLayer, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{}.w_reduce", l.name), &l.w_reduce));
    out.push((format!("{}.b_reduce", l.name), &l.b_reduce));
    out.push((format!("{}.w_expand", l.name), &l.w_expand));
    out.push((format!("{}.b_expand", l.name), &l.b_expand));
}

fn collect_se_mut<'a>(l: &'a mut SqueezeExciteLayer, out: &mut Vec<&'a mut Tensor>) {
    out.push(&mut l.w_reduce);
    out.push(&mut l.b_reduce);
    out.push(&mut l.w_expand);
    out.push(&mut l.b_expand);
}
