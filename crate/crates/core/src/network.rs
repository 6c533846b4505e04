//! Layer composition, forward passes, and activation recording.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::layers::{ForwardCtx, Layer, Mode};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use crate::Result;

/// Pseudo-layer name under which the network input is recorded.
pub const INPUT_LAYER: &str = "input";

/// An ordered stack of named layers ending in a softmax over `K` classes.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    class_count: usize,
    input_channels: usize,
    resolution: usize,
}

/// Value ids produced by one recorded forward pass.
pub struct ForwardPass {
    /// Softmax output, `[N, K]`.
    pub probs: ValueId,
    /// Pre-softmax scores, `[N, K]`.
    pub logits: ValueId,
}

/// Named layer outputs of a single forward pass, in execution order.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    entries: Vec<(String, Tensor)>,
}

impl ActivationRecord {
    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, class_count: usize, input_channels: usize, resolution: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::invalid("network", "class count must be positive"));
        }
        if !matches!(layers.last(), Some(Layer::Softmax { .. })) {
            return Err(Error::invalid("network", "final layer must be softmax"));
        }
        let net = Network {
            layers,
            class_count,
            input_channels,
            resolution,
        };
        let names = net.layer_names();
        for (i, a) in names.iter().enumerate() {
            if names[i + 1..].contains(a) {
                return Err(Error::invalid(
                    "network",
                    alloc::format!("duplicate layer name {:?}", a),
                ));
            }
        }
        Ok(net)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let [_, c, h, w] = input.shape()[..] else {
            return Err(Error::invalid(
                "forward",
                alloc::format!("input must be [N,C,H,W], got {:?}", input.shape()),
            ));
        };
        if c != self.input_channels || h != self.resolution || w != self.resolution {
            return Err(Error::invalid(
                "forward",
                alloc::format!(
                    "input {}x{}x{} does not match declared {}x{}x{} (no implicit resize)",
                    c,
                    h,
                    w,
                    self.input_channels,
                    self.resolution,
                    self.resolution
                ),
            ));
        }
        Ok(())
    }

    /// Runs the network on an already-recorded input value. The input is
    /// recorded in the trace under [`INPUT_LAYER`]; the value feeding the
    /// final softmax is returned as the logits.
    pub fn forward_on_tape(&self, tape: &mut Tape, input: ValueId, ctx: &mut ForwardCtx) -> Result<ForwardPass> {
        self.check_input(tape.value(input))?;
        ctx.trace.push((String::from(INPUT_LAYER), input));
        let mut current = input;
        let mut logits = input;
        for layer in &self.layers {
            if matches!(layer, Layer::Softmax { .. }) {
                logits = current;
            }
            current = layer.forward(tape, current, ctx)?;
        }
        Ok(ForwardPass {
            probs: current,
            logits,
        })
    }

    /// Inference forward pass: rows of the result are probability vectors.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let id = tape.leaf(input.clone());
        let mut ctx = ForwardCtx::infer();
        let pass = self.forward_on_tape(&mut tape, id, &mut ctx)?;
        Ok(tape.value(pass.probs).clone())
    }

    /// Inference forward pass that also captures every named layer output.
    /// The probabilities are bit-identical to [`Network::forward`].
    pub fn forward_with_recording(&self, input: &Tensor) -> Result<(Tensor, ActivationRecord)> {
        let mut tape = Tape::new();
        let id = tape.leaf(input.clone());
        let mut ctx = ForwardCtx::infer();
        let pass = self.forward_on_tape(&mut tape, id, &mut ctx)?;
        let entries = ctx
            .trace
            .iter()
            .map(|(name, vid)| (name.clone(), tape.value(*vid).clone()))
            .collect();
        Ok((tape.value(pass.probs).clone(), ActivationRecord { entries }))
    }

    /// Predicted class per row (argmax of probabilities; first max wins).
    pub fn predict(&self, input: &Tensor) -> Result<Vec<usize>> {
        let probs = self.forward(input)?;
        let k = self.class_count;
        Ok(probs
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Every named layer in execution order, including MBConv sub-layers,
    /// with the input pseudo-layer first.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.push(String::from(INPUT_LAYER));
        for layer in &self.layers {
            collect_names(layer, &mut names);
        }
        names
    }

    /// Names of layers with spatial convolutional outputs (conv and
    /// depthwise, including those inside MBConv blocks).
    pub fn conv_layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            collect_conv_names(layer, &mut names);
        }
        names
    }

    /// Default GradCAM target: the last convolutional layer.
    pub fn last_conv_layer(&self) -> Option<String> {
        self.conv_layer_names().pop()
    }

    /// Trainable parameters as (path, tensor) in checkpoint order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(n, _)| n)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// All persistent tensors (parameters plus batch-norm running
    /// statistics) in checkpoint order.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| l.state())
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn state_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.state())
            .map(|(n, _)| n)
            .collect()
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.state_mut()).collect()
    }

    /// Applies train-mode batch statistics to the matching batch-norm
    /// layers' running estimates.
    pub fn apply_bn_updates(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)]) {
        for layer in &mut self.layers {
            layer.visit_bn_mut(&mut |bn| {
                if let Some((_, mean, var)) = stats.iter().find(|(n, _, _)| *n == bn.name) {
                    bn.update_running(mean, var);
                }
            });
        }
    }
}

fn collect_names(layer: &Layer, names: &mut Vec<String>) {
    match layer {
        Layer::MBConv(b) => {
            if let Some((conv, bn)) = &b.expand {
                names.push(conv.name.clone());
                names.push(bn.name.clone());
                names.push(alloc::format!("{}.expand_swish", b.name));
            }
            names.push(b.depthwise.name.clone());
            names.push(b.dw_norm.name.clone());
            names.push(alloc::format!("{}.dw_swish", b.name));
            if let Some(se) = &b.se {
                names.push(se.name.clone());
            }
            names.push(b.project.name.clone());
            names.push(b.project_norm.name.clone());
            names.push(b.name.clone());
        }
        other => names.push(String::from(other.name())),
    }
}

fn collect_conv_names(layer: &Layer, names: &mut Vec<String>) {
    match layer {
        Layer::Conv(l) => names.push(l.name.clone()),
        Layer::Depthwise(l) => names.push(l.name.clone()),
        Layer::MBConv(b) => {
            if let Some((conv, _)) = &b.expand {
                names.push(conv.name.clone());
            }
            names.push(b.depthwise.name.clone());
            names.push(b.project.name.clone());
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv2dLayer, DenseLayer, MBConvBlock, MBConvConfig};
    use crate::rng::SplitMix64;
    use crate::tape::Padding;
    use alloc::vec;

    fn tiny_net(k: usize, seed: u64) -> Network {
        let mut rng = SplitMix64::new(seed);
        let layers = vec![
            Layer::Conv(Conv2dLayer::init("conv0", 1, 2, 3, 1, Padding::Same, &mut rng).unwrap()),
            Layer::Swish {
                name: String::from("swish0"),
            },
            Layer::GlobalAvgPool {
                name: String::from("gap"),
            },
            Layer::Dense(DenseLayer::init("fc", 2, k, &mut rng)),
            Layer::Softmax {
                name: String::from("softmax"),
            },
        ];
        Network::new(layers, k, 1, 4).unwrap()
    }

    #[test]
    fn forward_rows_are_probability_vectors() {
        let net = tiny_net(3, 1);
        let mut rng = SplitMix64::new(9);
        let input = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|_| rng.next_f64()).collect()).unwrap();
        let probs = net.forward(&input).unwrap();
        assert_eq!(probs.shape(), &[2, 3]);
        for row in probs.data().chunks(3) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_weights_give_uniform_probs() {
        let mut net = tiny_net(3, 2);
        if let Layer::Dense(d) = &mut net.layers[3] {
            d.weights = Tensor::zeros(&[2, 3]);
            d.bias = Some(Tensor::zeros(&[3]));
        }
        let input = Tensor::ones(&[1, 1, 4, 4]);
        let probs = net.forward(&input).unwrap();
        for &p in probs.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let net = tiny_net(2, 3);
        let input = Tensor::ones(&[1, 1, 8, 8]);
        assert!(net.forward(&input).is_err());
    }

    #[test]
    fn recording_matches_forward_bit_exactly() {
        let net = tiny_net(3, 4);
        let mut rng = SplitMix64::new(10);
        let input = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| rng.next_f64()).collect()).unwrap();
        let plain = net.forward(&input).unwrap();
        let (probs, record) = net.forward_with_recording(&input).unwrap();
        assert_eq!(plain.data(), probs.data());
        assert_eq!(record.len(), net.layer_names().len());
        assert_eq!(record.get("softmax").unwrap().data(), probs.data());
        assert_eq!(record.get(INPUT_LAYER).unwrap().data(), input.data());
    }

    #[test]
    fn record_replay_reproduces_forward() {
        // Two-layer toy: replaying the recorded GAP output through the
        // remaining layers must land on the recorded softmax output.
        let net = tiny_net(2, 5);
        let input = Tensor::ones(&[1, 1, 4, 4]);
        let (_, record) = net.forward_with_recording(&input).unwrap();
        let gap_out = record.get("gap").unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(gap_out.clone());
        let mut ctx = ForwardCtx::infer();
        let mut current = id;
        for layer in &net.layers[3..] {
            current = layer.forward(&mut tape, current, &mut ctx).unwrap();
        }
        assert_eq!(tape.value(current).data(), record.get("softmax").unwrap().data());
    }

    #[test]
    fn duplicate_layer_names_rejected() {
        let mut rng = SplitMix64::new(6);
        let layers = vec![
            Layer::GlobalAvgPool {
                name: String::from("x"),
            },
            Layer::Dense(DenseLayer::init("x", 1, 2, &mut rng)),
            Layer::Softmax {
                name: String::from("softmax"),
            },
        ];
        assert!(Network::new(layers, 2, 1, 4).is_err());
    }

    #[test]
    fn network_must_end_in_softmax() {
        let mut rng = SplitMix64::new(6);
        let layers = vec![Layer::Dense(DenseLayer::init("fc", 1, 2, &mut rng))];
        assert!(Network::new(layers, 2, 1, 4).is_err());
    }

    #[test]
    fn param_ids_align_with_params_order() {
        let net = tiny_net(3, 7);
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::ones(&[1, 1, 4, 4]));
        let mut ctx = ForwardCtx::infer();
        net.forward_on_tape(&mut tape, input, &mut ctx).unwrap();
        let params = net.params();
        assert_eq!(ctx.param_ids.len(), params.len());
        for (id, (_, tensor)) in ctx.param_ids.iter().zip(params.iter()) {
            assert_eq!(tape.value(*id).data(), tensor.data());
        }
    }

    #[test]
    fn mbconv_skip_rule() {
        let mut rng = SplitMix64::new(8);
        // stride 1, in == out: residual active; zeroing the projection
        // weights and batch-norm output leaves the input unchanged.
        let cfg = MBConvConfig {
            expansion: 2.0,
            kernel: 3,
            stride: 1,
            in_channels: 2,
            out_channels: 2,
            se_ratio: 0.25,
        };
        let mut block = MBConvBlock::init("b", cfg, &mut rng).unwrap();
        block.project.weights = Tensor::zeros(block.project.weights.shape());
        let input = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|i| i as f64 / 31.0).collect()).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(input.clone());
        let mut ctx = ForwardCtx::infer();
        let out = block.forward(&mut tape, id, &mut ctx).unwrap();
        assert_eq!(tape.value(out).data(), input.data());
    }

    #[test]
    fn mbconv_stride_two_halves_spatial_extent() {
        let mut rng = SplitMix64::new(9);
        let cfg = MBConvConfig {
            expansion: 6.0,
            kernel: 3,
            stride: 2,
            in_channels: 2,
            out_channels: 4,
            se_ratio: 0.25,
        };
        let block = MBConvBlock::init("b", cfg, &mut rng).unwrap();
        let input = Tensor::ones(&[1, 2, 5, 5]);
        let mut tape = Tape::new();
        let id = tape.leaf(input);
        let mut ctx = ForwardCtx::infer();
        let out = block.forward(&mut tape, id, &mut ctx).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 4, 3, 3]);
    }

    #[test]
    fn mbconv_expansion_one_has_no_expand_stage() {
        let mut rng = SplitMix64::new(10);
        let cfg = MBConvConfig {
            expansion: 1.0,
            kernel: 3,
            stride: 1,
            in_channels: 4,
            out_channels: 4,
            se_ratio: 0.25,
        };
        let block = MBConvBlock::init("b", cfg.clone(), &mut rng).unwrap();
        assert!(block.expand.is_none());
        // Expected parameter count: depthwise + dw_bn + SE + project + project_bn.
        let dw = 4 * 3 * 3;
        let bn = 2 * 4;
        let se = 4 * 1 + 1 + 1 * 4 + 4;
        let proj = 4 * 4 * 1 * 1;
        let expect = dw + bn + se + proj + bn;
        let got: usize = Layer::MBConv(block).params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(got, expect);
    }
}
