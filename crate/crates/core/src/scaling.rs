//! Compound model scaling: depth, width, and resolution multipliers from a
//! single exponent, plus network construction and parameter/MAC accounting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::layers::{BatchNormLayer, Conv2dLayer, DenseLayer, Layer, MBConvBlock, MBConvConfig};
use crate::math;
use crate::network::Network;
use crate::rng::SplitMix64;
use crate::tape::Padding;
use crate::Result;

/// One stage of repeated MBConv blocks. `stride` applies to the first block
/// of the stage; the rest run at stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub repeats: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub expansion: f64,
    pub se_ratio: f64,
}

/// Declarative description of an unscaled network.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseArchitecture {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub head_channels: usize,
    pub classes: usize,
    pub input_channels: usize,
    pub resolution: usize,
}

impl BaseArchitecture {
    /// The shipped default base: small enough to train on a CPU in minutes
    /// while exercising every block type. The class count is always an
    /// explicit argument, never inferred.
    pub fn toy_b0(classes: usize) -> Self {
        BaseArchitecture {
            stem_channels: 16,
            stem_kernel: 3,
            stem_stride: 2,
            stages: vec![
                StageConfig {
                    repeats: 1,
                    channels: 16,
                    kernel: 3,
                    stride: 1,
                    expansion: 1.0,
                    se_ratio: 0.25,
                },
                StageConfig {
                    repeats: 2,
                    channels: 24,
                    kernel: 3,
                    stride: 2,
                    expansion: 6.0,
                    se_ratio: 0.25,
                },
                StageConfig {
                    repeats: 2,
                    channels: 40,
                    kernel: 3,
                    stride: 2,
                    expansion: 6.0,
                    se_ratio: 0.25,
                },
            ],
            head_channels: 128,
            classes,
            input_channels: 1,
            resolution: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("architecture", "at least one stage required"));
        }
        if self.stages.iter().any(|s| s.repeats == 0) {
            return Err(Error::invalid("architecture", "stage repeats must be at least 1"));
        }
        let stride_product: usize = self.stem_stride * self.stages.iter().map(|s| s.stride).product::<usize>();
        if self.resolution % stride_product != 0 {
            return Err(Error::invalid(
                "architecture",
                format!(
                    "resolution {} not divisible by total stride {}",
                    self.resolution, stride_product
                ),
            ));
        }
        if self.classes == 0 {
            return Err(Error::invalid("architecture", "class count must be positive"));
        }
        Ok(())
    }
}

/// The `(alpha, beta, gamma, phi)` exponent family. `alpha`, `beta`, and
/// `gamma` must be `>= 1`; `alpha * beta^2 * gamma^2` is expected to stay
/// within `tolerance` of 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
    pub tolerance: f64,
}

pub const DEFAULT_ALPHA: f64 = 1.2;
pub const DEFAULT_BETA: f64 = 1.1;
pub const DEFAULT_GAMMA: f64 = 1.15;
pub const DEFAULT_CONSTRAINT_TOLERANCE: f64 = 0.2;
/// Constraint deviations above this produce a warning status.
pub const CONSTRAINT_WARN_THRESHOLD: f64 = 0.1;

impl Default for ScalingCoefficients {
    /// Conventional coefficients for this architecture family; the
    /// constraint itself is the only pinned quantity, so these are
    /// configuration, not constants.
    fn default() -> Self {
        ScalingCoefficients {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            phi: 0.0,
            tolerance: DEFAULT_CONSTRAINT_TOLERANCE,
        }
    }
}

/// Constraint status for a set of coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintStatus {
    Ok,
    Warn,
    Violated,
}

impl ScalingCoefficients {
    pub fn new(alpha: f64, beta: f64, gamma: f64, phi: f64) -> Self {
        ScalingCoefficients {
            alpha,
            beta,
            gamma,
            phi,
            ..Default::default()
        }
    }

    /// `alpha * beta^2 * gamma^2`.
    pub fn constraint_value(&self) -> f64 {
        self.alpha * self.beta * self.beta * self.gamma * self.gamma
    }

    pub fn constraint_status(&self) -> ConstraintStatus {
        let dev = (self.constraint_value() - 2.0).abs();
        if dev > self.tolerance {
            ConstraintStatus::Violated
        } else if dev > CONSTRAINT_WARN_THRESHOLD {
            ConstraintStatus::Warn
        } else {
            ConstraintStatus::Ok
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 1.0 || self.beta < 1.0 || self.gamma < 1.0 {
            return Err(Error::invalid(
                "scaling",
                "alpha, beta, and gamma must each be >= 1",
            ));
        }
        if self.phi < 0.0 {
            return Err(Error::invalid("scaling", "phi must be non-negative"));
        }
        if self.constraint_status() == ConstraintStatus::Violated {
            return Err(Error::ScalingConstraint {
                value: self.constraint_value(),
                tolerance: self.tolerance,
            });
        }
        Ok(())
    }
}

/// A base architecture after compound scaling: rounded repeats, channel
/// counts snapped to multiples of 8, and an even input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledModelPlan {
    pub depth_mult: f64,
    pub width_mult: f64,
    pub resolution_mult: f64,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub head_channels: usize,
    pub classes: usize,
    pub input_channels: usize,
    pub resolution: usize,
}

/// Width scaling: snap `w * c` to the nearest multiple of 8, never dropping
/// below 8 unless the base was already below 8 (in which case the base
/// count is kept until the scaled target reaches 8). `w == 1` is an exact
/// passthrough so a zero exponent reproduces the base bit-for-bit.
fn scale_channels(c: usize, w: f64) -> usize {
    if w == 1.0 {
        return c;
    }
    let target = w * c as f64;
    if c < 8 && target < 8.0 {
        return c;
    }
    let snapped = (math::round(target / 8.0) as usize) * 8;
    snapped.max(8)
}

/// Resolution scaling: nearest even integer to `r * resolution`, with
/// `r == 1` as an exact passthrough.
fn scale_resolution(resolution: usize, r: f64) -> usize {
    if r == 1.0 {
        return resolution;
    }
    let half = r * resolution as f64 / 2.0;
    (math::round(half) as usize * 2).max(2)
}

/// Applies the exponent family to a base architecture.
pub fn compound_scale(base: &BaseArchitecture, coeffs: &ScalingCoefficients) -> Result<ScaledModelPlan> {
    base.validate()?;
    coeffs.validate()?;
    let d = math::powf(coeffs.alpha, coeffs.phi);
    let w = math::powf(coeffs.beta, coeffs.phi);
    let r = math::powf(coeffs.gamma, coeffs.phi);
    let stages = base
        .stages
        .iter()
        .map(|s| StageConfig {
            repeats: math::ceil(d * s.repeats as f64) as usize,
            channels: scale_channels(s.channels, w),
            ..s.clone()
        })
        .collect();
    Ok(ScaledModelPlan {
        depth_mult: d,
        width_mult: w,
        resolution_mult: r,
        stem_channels: scale_channels(base.stem_channels, w),
        stem_kernel: base.stem_kernel,
        stem_stride: base.stem_stride,
        stages,
        head_channels: scale_channels(base.head_channels, w),
        classes: base.classes,
        input_channels: base.input_channels,
        resolution: scale_resolution(base.resolution, r),
    })
}

impl ScaledModelPlan {
    /// The identity plan for a base (equivalent to a zero exponent).
    pub fn identity(base: &BaseArchitecture) -> Result<Self> {
        compound_scale(base, &ScalingCoefficients::default())
    }

    /// Block configurations in network order: (block name, config).
    fn block_configs(&self) -> Vec<(String, MBConvConfig)> {
        let mut blocks = Vec::new();
        let mut in_ch = self.stem_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            for bi in 0..stage.repeats {
                let cfg = MBConvConfig {
                    expansion: stage.expansion,
                    kernel: stage.kernel,
                    stride: if bi == 0 { stage.stride } else { 1 },
                    in_channels: in_ch,
                    out_channels: stage.channels,
                    se_ratio: stage.se_ratio,
                };
                blocks.push((format!("s{si}_b{bi}"), cfg));
                in_ch = stage.channels;
            }
        }
        blocks
    }
}

/// Materializes a plan into a network with deterministic, seed-derived
/// initial weights.
pub fn build_network(plan: &ScaledModelPlan, seed: u64) -> Result<Network> {
    let mut rng = SplitMix64::derive(seed, &[u64::from_le_bytes(*b"netinit\0")]);
    let mut layers = Vec::new();
    layers.push(Layer::Conv(Conv2dLayer::init(
        "stem_conv",
        plan.input_channels,
        plan.stem_channels,
        plan.stem_kernel,
        plan.stem_stride,
        Padding::Same,
        &mut rng,
    )?));
    layers.push(Layer::BatchNorm(BatchNormLayer::init("stem_bn", plan.stem_channels)));
    layers.push(Layer::Swish {
        name: String::from("stem_swish"),
    });
    let mut last_ch = plan.stem_channels;
    for (name, cfg) in plan.block_configs() {
        last_ch = cfg.out_channels;
        layers.push(Layer::MBConv(MBConvBlock::init(name, cfg, &mut rng)?));
    }
    layers.push(Layer::Conv(Conv2dLayer::init(
        "head_conv",
        last_ch,
        plan.head_channels,
        1,
        1,
        Padding::Same,
        &mut rng,
    )?));
    layers.push(Layer::BatchNorm(BatchNormLayer::init("head_bn", plan.head_channels)));
    layers.push(Layer::Swish {
        name: String::from("head_swish"),
    });
    layers.push(Layer::GlobalAvgPool {
        name: String::from("gap"),
    });
    layers.push(Layer::Dense(DenseLayer::init(
        "fc",
        plan.head_channels,
        plan.classes,
        &mut rng,
    )));
    layers.push(Layer::Softmax {
        name: String::from("softmax"),
    });
    Network::new(layers, plan.classes, plan.input_channels, plan.resolution)
}

/// Exact trainable-parameter count and multiply-accumulate count at the
/// plan's resolution (batch 1). MACs cover convolution and dense kernels:
/// `output positions x per-position kernel MACs`; normalization,
/// activations, pooling, and softmax contribute no kernel MACs.
pub fn count_params_flops(plan: &ScaledModelPlan) -> (u64, u64) {
    let mut params: u64 = 0;
    let mut macs: u64 = 0;
    let mut spatial = plan.resolution as u64;

    let conv = |params: &mut u64, macs: &mut u64, spatial: u64, in_ch: u64, out_ch: u64, k: u64, stride: u64| -> u64 {
        let out_spatial = spatial.div_ceil(stride);
        *params += out_ch * in_ch * k * k;
        *macs += out_spatial * out_spatial * out_ch * in_ch * k * k;
        out_spatial
    };
    let bn = |params: &mut u64, ch: u64| {
        *params += 2 * ch;
    };

    spatial = conv(
        &mut params,
        &mut macs,
        spatial,
        plan.input_channels as u64,
        plan.stem_channels as u64,
        plan.stem_kernel as u64,
        plan.stem_stride as u64,
    );
    bn(&mut params, plan.stem_channels as u64);

    for (_, cfg) in plan.block_configs() {
        let in_ch = cfg.in_channels as u64;
        let out_ch = cfg.out_channels as u64;
        let expanded = cfg.expanded_channels() as u64;
        let k = cfg.kernel as u64;
        let stride = cfg.stride as u64;
        let dw_ch = if cfg.expansion == 1.0 { in_ch } else { expanded };

        if cfg.expansion != 1.0 {
            conv(&mut params, &mut macs, spatial, in_ch, expanded, 1, 1);
            bn(&mut params, expanded);
        }
        // Depthwise: one kernel per channel.
        let out_spatial = spatial.div_ceil(stride);
        params += dw_ch * k * k;
        macs += out_spatial * out_spatial * dw_ch * k * k;
        spatial = out_spatial;
        bn(&mut params, dw_ch);
        if cfg.se_ratio > 0.0 {
            let reduced = crate::layers::SqueezeExciteLayer::reduced_width(cfg.in_channels, cfg.se_ratio) as u64;
            params += dw_ch * reduced + reduced;
            macs += dw_ch * reduced;
            params += reduced * dw_ch + dw_ch;
            macs += reduced * dw_ch;
        }
        conv(&mut params, &mut macs, spatial, dw_ch, out_ch, 1, 1);
        bn(&mut params, out_ch);
    }

    let last_ch = plan.stages.last().map(|s| s.channels).unwrap_or(plan.stem_channels) as u64;
    conv(
        &mut params,
        &mut macs,
        spatial,
        last_ch,
        plan.head_channels as u64,
        1,
        1,
    );
    bn(&mut params, plan.head_channels as u64);

    params += plan.head_channels as u64 * plan.classes as u64 + plan.classes as u64;
    macs += plan.head_channels as u64 * plan.classes as u64;

    (params, macs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_value_cases() {
        assert_eq!(ScalingCoefficients::new(2.0, 1.0, 1.0, 0.0).constraint_value(), 2.0);
        let v = ScalingCoefficients::default().constraint_value();
        assert!((v - 1.920270).abs() < 1e-6, "got {v}");
        assert_eq!(ScalingCoefficients::new(1.0, 1.0, 1.0, 0.0).constraint_value(), 1.0);
    }

    #[test]
    fn identity_coefficients_rejected_by_tolerance() {
        let c = ScalingCoefficients::new(1.0, 1.0, 1.0, 1.0);
        assert!(matches!(
            compound_scale(&BaseArchitecture::toy_b0(3), &c),
            Err(Error::ScalingConstraint { .. })
        ));
    }

    #[test]
    fn phi_zero_reproduces_base_exactly() {
        let base = BaseArchitecture::toy_b0(3);
        let plan = compound_scale(&base, &ScalingCoefficients::default()).unwrap();
        assert_eq!(plan.depth_mult, 1.0);
        assert_eq!(plan.width_mult, 1.0);
        assert_eq!(plan.resolution_mult, 1.0);
        assert_eq!(plan.stem_channels, base.stem_channels);
        assert_eq!(plan.head_channels, base.head_channels);
        assert_eq!(plan.resolution, base.resolution);
        assert_eq!(plan.stages, base.stages);
    }

    #[test]
    fn multipliers_at_phi_one_and_two() {
        let mut c = ScalingCoefficients::default();
        c.phi = 1.0;
        let p1 = compound_scale(&BaseArchitecture::toy_b0(3), &c).unwrap();
        assert!((p1.depth_mult - 1.2).abs() < 1e-12);
        assert!((p1.width_mult - 1.1).abs() < 1e-12);
        assert!((p1.resolution_mult - 1.15).abs() < 1e-12);
        c.phi = 2.0;
        let p2 = compound_scale(&BaseArchitecture::toy_b0(3), &c).unwrap();
        assert!((p2.depth_mult - 1.44).abs() < 1e-12);
        assert!((p2.width_mult - 1.21).abs() < 1e-12);
        assert!((p2.resolution_mult - 1.3225).abs() < 1e-12);
    }

    #[test]
    fn depth_two_doubles_block_counts() {
        let base = BaseArchitecture::toy_b0(3);
        let c = ScalingCoefficients::new(2.0, 1.0, 1.0, 1.0);
        let plan = compound_scale(&base, &c).unwrap();
        for (scaled, orig) in plan.stages.iter().zip(base.stages.iter()) {
            assert_eq!(scaled.repeats, orig.repeats * 2);
        }
    }

    #[test]
    fn scaled_channels_are_multiples_of_eight() {
        let base = BaseArchitecture::toy_b0(3);
        for phi in [1.0, 2.0, 3.0] {
            let mut c = ScalingCoefficients::default();
            c.phi = phi;
            let plan = compound_scale(&base, &c).unwrap();
            assert_eq!(plan.stem_channels % 8, 0);
            assert_eq!(plan.head_channels % 8, 0);
            for s in &plan.stages {
                assert_eq!(s.channels % 8, 0, "phi {phi} stage channels {}", s.channels);
            }
        }
    }

    #[test]
    fn sub_eight_channels_keep_base_until_target_reaches_eight() {
        assert_eq!(scale_channels(4, 1.0), 4);
        assert_eq!(scale_channels(4, 1.5), 4);
        assert_eq!(scale_channels(4, 2.2), 8);
        assert_eq!(scale_channels(8, 1.0), 8);
        assert_eq!(scale_channels(16, 1.1), 16);
        assert_eq!(scale_channels(16, 1.21), 16);
        assert_eq!(scale_channels(40, 1.21), 48);
    }

    #[test]
    fn resolution_rounds_to_nearest_even() {
        assert_eq!(scale_resolution(32, 1.0), 32);
        assert_eq!(scale_resolution(32, 1.15), 36);
        assert_eq!(scale_resolution(32, 1.3225), 42);
    }

    #[test]
    fn monotonicity_in_phi() {
        let base = BaseArchitecture::toy_b0(3);
        let mut prev_params = 0u64;
        let mut prev: Option<ScaledModelPlan> = None;
        for phi in [0.0, 1.0, 2.0, 3.0] {
            let mut c = ScalingCoefficients::default();
            c.phi = phi;
            let plan = compound_scale(&base, &c).unwrap();
            let (params, _) = count_params_flops(&plan);
            if let Some(p) = &prev {
                for (now, before) in plan.stages.iter().zip(p.stages.iter()) {
                    assert!(now.repeats >= before.repeats);
                    assert!(now.channels >= before.channels);
                }
                assert!(params > prev_params, "params must strictly increase");
            }
            prev_params = params;
            prev = Some(plan);
        }
    }

    #[test]
    fn mac_growth_per_unit_phi_in_band() {
        let base = BaseArchitecture::toy_b0(3);
        let mut macs = Vec::new();
        for phi in [0.0, 1.0, 2.0] {
            let mut c = ScalingCoefficients::default();
            c.phi = phi;
            let plan = compound_scale(&base, &c).unwrap();
            macs.push(count_params_flops(&plan).1 as f64);
        }
        for w in macs.windows(2) {
            let ratio = w[1] / w[0];
            assert!((1.6..=2.6).contains(&ratio), "growth ratio {ratio}");
        }
    }

    #[test]
    fn dense_and_conv_param_examples() {
        // 10 -> 3 dense with bias.
        assert_eq!(10 * 3 + 3, 33);
        // Accounting for a 1x1 conv, 8 -> 16 channels with bias on 4x4 input.
        let params = 8 * 16 + 16;
        let macs = 16 * 4 * 4 * 8;
        assert_eq!(params, 144);
        assert_eq!(macs, 2048);
    }

    #[test]
    fn count_matches_built_network() {
        let plan = ScaledModelPlan::identity(&BaseArchitecture::toy_b0(3)).unwrap();
        let net = build_network(&plan, 17).unwrap();
        let built: u64 = net.params().iter().map(|(_, t)| t.numel() as u64).sum();
        let (counted, _) = count_params_flops(&plan);
        assert_eq!(built, counted);
    }

    #[test]
    fn phi_zero_network_matches_base_structure() {
        let base = BaseArchitecture::toy_b0(3);
        let plan = ScaledModelPlan::identity(&base).unwrap();
        let net = build_network(&plan, 5).unwrap();
        let block_count: usize = base.stages.iter().map(|s| s.repeats).sum();
        let mbconvs = net
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::MBConv(_)))
            .count();
        assert_eq!(mbconvs, block_count);
        assert_eq!(net.resolution(), base.resolution);
        assert_eq!(net.class_count(), base.classes);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let plan = ScaledModelPlan::identity(&BaseArchitecture::toy_b0(2)).unwrap();
        let a = build_network(&plan, 99).unwrap();
        let b = build_network(&plan, 99).unwrap();
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = build_network(&plan, 100).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }
}
