//! Label-smoothed categorical cross-entropy.

use alloc::format;
use alloc::vec;

use crate::error::Error;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use crate::Result;

/// Floor added to probabilities before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Default smoothing strength.
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// Soft target for class `label` out of `k`: `(1-eps) * one_hot + eps/k`.
///
/// The target entry absorbs the rounding of the off-class entries so the
/// left-to-right sum of the result is exactly 1.
pub fn smoothed_target(label: usize, eps: f64, k: usize) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(
            "label_smooth",
            format!("smoothing must lie in [0,1), got {eps}"),
        ));
    }
    if label >= k {
        return Err(Error::invalid(
            "label_smooth",
            format!("label {label} out of range for {k} classes"),
        ));
    }
    let off = eps / k as f64;
    let mut data = vec![off; k];
    data[label] = (1.0 - eps) + off;
    // Nudge the target entry by ulps until the sequential sum lands on 1.
    for _ in 0..64 {
        let total: f64 = data.iter().fold(0.0, |acc, &x| acc + x);
        if total == 1.0 {
            break;
        }
        data[label] = if total < 1.0 {
            data[label].next_up()
        } else {
            data[label].next_down()
        };
    }
    Tensor::new(vec![k], data)
}

/// Smooths a one-hot vector. Errors if the input is not one-hot or `eps`
/// is outside `[0, 1)`.
pub fn label_smooth(one_hot: &Tensor, eps: f64) -> Result<Tensor> {
    let k = one_hot.numel();
    let mut label = None;
    for (i, &v) in one_hot.iter().enumerate() {
        if v == 1.0 {
            if label.is_some() {
                return Err(Error::invalid("label_smooth", "input has multiple ones"));
            }
            label = Some(i);
        } else if v != 0.0 {
            return Err(Error::invalid(
                "label_smooth",
                format!("input entry {v} is neither 0 nor 1"),
            ));
        }
    }
    let label = label.ok_or_else(|| Error::invalid("label_smooth", "input has no one entry"))?;
    smoothed_target(label, eps, k)
}

/// `-sum(target * ln(probs + 1e-12))` for a single distribution pair.
pub fn cross_entropy(probs: &Tensor, target: &Tensor) -> Result<f64> {
    if probs.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: probs.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    if let Some(bad) = probs.iter().find(|&&p| p < 0.0) {
        return Err(Error::domain(
            "cross_entropy",
            format!("negative probability {bad}"),
        ));
    }
    Ok(-probs
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| t * crate::math::ln(p + LOG_FLOOR))
        .sum::<f64>())
}

/// Mean cross-entropy over the rows of `[N, K]` probability/target pairs.
pub fn cross_entropy_batch(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    if probs.shape() != targets.shape() || probs.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: probs.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let k = probs.shape()[1];
    let n = probs.shape()[0];
    let mut total = 0.0;
    for row in 0..n {
        let p = Tensor::new(vec![k], probs.data()[row * k..(row + 1) * k].to_vec())?;
        let t = Tensor::new(vec![k], targets.data()[row * k..(row + 1) * k].to_vec())?;
        total += cross_entropy(&p, &t)?;
    }
    Ok(total / n as f64)
}

/// Shannon entropy `-sum(t ln t)` with the `0 ln 0 = 0` convention.
pub fn entropy(target: &Tensor) -> f64 {
    -target
        .iter()
        .map(|&t| if t > 0.0 { t * crate::math::ln(t) } else { 0.0 })
        .sum::<f64>()
}

/// Records the batched loss on the tape: mean over rows of
/// `-sum(target * ln(probs + 1e-12))`. Targets are constants.
pub fn cross_entropy_on_tape(tape: &mut Tape, probs: ValueId, targets: &Tensor) -> Result<ValueId> {
    if tape.value(probs).shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: tape.value(probs).shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let t = tape.leaf(targets.clone());
    let floored = tape.add_const(probs, LOG_FLOOR)?;
    let logp = tape.log(floored)?;
    let weighted = tape.mul(logp, t)?;
    let per_row = tape.reduce_sum(weighted, &[1])?;
    let mean = tape.reduce_mean(per_row, &[0])?;
    tape.mul_const(mean, -1.0)
}
