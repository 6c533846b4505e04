//! Gradient-weighted class activation maps, mask statistics, and
//! intermediate activation-map extraction.
//!
//! For a target class score `Y` and a convolutional layer's activation maps
//! `A_k`, the per-filter importance weight is the global spatial mean of
//! `dY/dA_k`; the saliency map is `ReLU(sum_k w_k A_k)`, normalized by its
//! maximum and bilinearly upsampled to the input resolution.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::resize;
use crate::error::Error;
use crate::layers::ForwardCtx;
use crate::math;
use crate::network::Network;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Result;

/// Which scalar the saliency gradients flow from.
///
/// The logit is the conventional choice (gradients of the softmax output
/// saturate); the probability target is available as a documented
/// alternative reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradCamTarget {
    #[default]
    Logit,
    Probability,
}

/// A class-discriminative saliency map at three stages.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub layer: String,
    pub class_index: usize,
    /// `ReLU(sum_k w_k A_k)` at the layer's spatial size.
    pub raw: Tensor,
    /// `raw / max(raw)` when the maximum is positive, else all zeros.
    pub normalized: Tensor,
    /// Normalized map bilinearly upsampled to the input resolution.
    pub upsampled: Tensor,
}

/// `ReLU(sum_k weights[k] * maps[k])`; exposed separately for unit testing.
pub fn weight_combine(weights: &[f64], maps: &[Tensor]) -> Result<Tensor> {
    if weights.len() != maps.len() {
        return Err(Error::invalid(
            "weight_combine",
            format!("{} weights for {} maps", weights.len(), maps.len()),
        ));
    }
    if maps.is_empty() {
        return Err(Error::invalid("weight_combine", "no maps given"));
    }
    let shape = maps[0].shape().to_vec();
    if maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::invalid("weight_combine", "maps must share one shape"));
    }
    let mut out = Tensor::zeros(&shape);
    for (w, m) in weights.iter().zip(maps.iter()) {
        for (o, &v) in out.data_mut().iter_mut().zip(m.iter()) {
            *o += w * v;
        }
    }
    Ok(out.map(|v| if v > 0.0 { v } else { 0.0 }))
}

fn normalize_by_max(raw: &Tensor) -> Tensor {
    let max = raw.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        raw.scale(1.0 / max)
    } else {
        Tensor::zeros(raw.shape())
    }
}

fn as_batch_one(image: &Tensor) -> Result<Tensor> {
    match image.shape()[..] {
        [_, _, _] => {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            image.reshape(&shape)
        }
        [1, _, _, _] => Ok(image.clone()),
        _ => Err(Error::invalid(
            "gradcam",
            format!("expected [C,H,W] or [1,C,H,W] input, got {:?}", image.shape()),
        )),
    }
}

/// Computes the saliency map of `class_index` at `layer` (default: the last
/// convolutional layer) for a single preprocessed image.
pub fn gradcam(
    network: &Network,
    image: &Tensor,
    class_index: usize,
    layer: Option<&str>,
    target: GradCamTarget,
) -> Result<Heatmap> {
    if class_index >= network.class_count() {
        return Err(Error::invalid(
            "gradcam",
            format!(
                "class {class_index} out of range for {} classes",
                network.class_count()
            ),
        ));
    }
    let input = as_batch_one(image)?;
    let layer_name = match layer {
        Some(name) => String::from(name),
        None => network
            .last_conv_layer()
            .ok_or_else(|| Error::invalid("gradcam", "network has no convolutional layer"))?,
    };

    let mut tape = Tape::new();
    let input_id = tape.leaf(input.clone());
    let mut ctx = ForwardCtx::infer();
    let pass = network.forward_on_tape(&mut tape, input_id, &mut ctx)?;

    let layer_id = ctx
        .trace
        .iter()
        .find(|(n, _)| *n == layer_name)
        .map(|(_, id)| *id)
        .ok_or_else(|| Error::UnknownName {
            kind: "layer",
            name: layer_name.clone(),
            valid: network.conv_layer_names(),
        })?;
    let activation = tape.value(layer_id).clone();
    let [_, filters, h, w] = activation.shape()[..] else {
        return Err(Error::invalid(
            "gradcam",
            format!(
                "layer {:?} output {:?} is not spatial",
                layer_name,
                activation.shape()
            ),
        ));
    };

    let score = match target {
        GradCamTarget::Logit => tape.select(pass.logits, class_index)?,
        GradCamTarget::Probability => tape.select(pass.probs, class_index)?,
    };
    let grads = tape.backward(score)?;
    let d_activation = grads.dense(&tape, layer_id);

    let plane = h * w;
    let mut weights = Vec::with_capacity(filters);
    let mut maps = Vec::with_capacity(filters);
    for k in 0..filters {
        let base = k * plane;
        let grad_plane = &d_activation.data()[base..base + plane];
        weights.push(grad_plane.iter().sum::<f64>() / plane as f64);
        maps.push(Tensor::new(
            vec![h, w],
            activation.data()[base..base + plane].to_vec(),
        )?);
    }
    let raw = weight_combine(&weights, &maps)?;
    let normalized = normalize_by_max(&raw);
    let upsampled = resize(&normalized, network.resolution(), network.resolution())?;
    Ok(Heatmap {
        layer: layer_name,
        class_index,
        raw,
        normalized,
        upsampled,
    })
}

/// Mask of pixels strictly above one standard deviation over the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    /// `mean + std_dev`.
    pub threshold: f64,
    /// Flat indices with intensity strictly above the threshold.
    pub mask: Vec<usize>,
    /// Mean intensity over the mask (0 when the mask is empty).
    pub mask_mean: f64,
    pub empty: bool,
}

/// Computes the mean-plus-sigma mask over any non-empty map.
pub fn mask_stats(map: &Tensor) -> Result<MaskStats> {
    let n = map.numel();
    if n == 0 {
        return Err(Error::invalid("mask_stats", "empty map"));
    }
    let mean = map.iter().sum::<f64>() / n as f64;
    let var = map.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std_dev = math::sqrt(var);
    let threshold = mean + std_dev;
    let mask: Vec<usize> = map
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, _)| i)
        .collect();
    let empty = mask.is_empty();
    let mask_mean = if empty {
        0.0
    } else {
        mask.iter().map(|&i| map.data()[i]).sum::<f64>() / mask.len() as f64
    };
    Ok(MaskStats {
        mean,
        std_dev,
        threshold,
        mask,
        mask_mean,
        empty,
    })
}

/// Applies the template's mask to both maps: returns the template's stats
/// plus the other map's mean intensity over the template mask.
pub fn mask_compare(template: &Tensor, other: &Tensor) -> Result<(MaskStats, f64)> {
    if template.shape() != other.shape() {
        return Err(Error::ShapeMismatch {
            op: "mask_compare",
            left: template.shape().to_vec(),
            right: other.shape().to_vec(),
        });
    }
    let stats = mask_stats(template)?;
    let other_mean = if stats.empty {
        0.0
    } else {
        stats.mask.iter().map(|&i| other.data()[i]).sum::<f64>() / stats.mask.len() as f64
    };
    Ok((stats, other_mean))
}

/// One layer's filter maps tiled into a grid image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGrid {
    pub layer: String,
    pub filters: usize,
    pub tile_height: usize,
    pub tile_width: usize,
    /// Tiles per row; rows are `ceil(filters / tiles_per_row)`.
    pub tiles_per_row: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major grayscale grid with 1-pixel separators (value 0).
    pub pixels: Vec<u8>,
}

/// Per-layer grids for the selected layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationDump {
    pub layers: Vec<LayerGrid>,
}

/// Min-max normalizes each filter map to 0-255 (constant maps become all
/// zeros) and tiles them row-major with 1-pixel separators.
fn tile_filters(layer: &str, maps: &Tensor) -> Result<LayerGrid> {
    let [_, filters, h, w] = maps.shape()[..] else {
        return Err(Error::invalid(
            "activation_dump",
            format!("layer {:?} output {:?} is not spatial", layer, maps.shape()),
        ));
    };
    let tiles_per_row = int_sqrt_ceil(filters);
    let rows = filters.div_ceil(tiles_per_row);
    let width = tiles_per_row * w + (tiles_per_row - 1);
    let height = rows * h + (rows - 1);
    let mut pixels = vec![0u8; width * height];
    let plane = h * w;
    for f in 0..filters {
        let data = &maps.data()[f * plane..(f + 1) * plane];
        let min = data.iter().copied().fold(f64::INFINITY, f64::min);
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tile_y = (f / tiles_per_row) * (h + 1);
        let tile_x = (f % tiles_per_row) * (w + 1);
        for y in 0..h {
            for x in 0..w {
                let v = if max > min {
                    math::round((data[y * w + x] - min) / (max - min) * 255.0) as u8
                } else {
                    0
                };
                pixels[(tile_y + y) * width + tile_x + x] = v;
            }
        }
    }
    Ok(LayerGrid {
        layer: String::from(layer),
        filters,
        tile_height: h,
        tile_width: w,
        tiles_per_row,
        height,
        width,
        pixels,
    })
}

fn int_sqrt_ceil(n: usize) -> usize {
    let mut s = 1usize;
    while s * s < n {
        s += 1;
    }
    s
}

/// Extracts min-max-normalized filter grids for the selected layers
/// (default: every convolutional output).
pub fn activation_dump(network: &Network, image: &Tensor, selection: Option<&[String]>) -> Result<ActivationDump> {
    let input = as_batch_one(image)?;
    let (_, record) = network.forward_with_recording(&input)?;
    let default_names;
    let names: &[String] = match selection {
        Some(names) => names,
        None => {
            default_names = network.conv_layer_names();
            &default_names
        }
    };
    let mut layers = Vec::with_capacity(names.len());
    for name in names {
        let maps = record.get(name).ok_or_else(|| Error::UnknownName {
            kind: "layer",
            name: name.clone(),
            valid: record.entries().iter().map(|(n, _)| n.clone()).collect(),
        })?;
        layers.push(tile_filters(name, maps)?);
    }
    Ok(ActivationDump { layers })
}
