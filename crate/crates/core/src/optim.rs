//! Adam optimization and reduce-on-plateau learning-rate scheduling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::math;
use crate::tensor::Tensor;
use crate::Result;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Per-parameter first/second moment estimates plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)], learning_rate: f64) -> Self {
        AdamState {
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update. Errors (naming the parameter) on any non-finite
    /// gradient so the caller can abort the epoch.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "expected {} parameter tensors, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: params[i].shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {}", self.names[i]),
                });
            }
        }
        self.step += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let bc1 = 1.0 - self.beta1_pow;
        let bc2 = 1.0 - self.beta2_pow;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.learning_rate * m_hat / (math::sqrt(v_hat) + self.epsilon);
            }
        }
        Ok(())
    }
}

pub const PLATEAU_FACTOR: f64 = 0.5;
pub const PLATEAU_PATIENCE: usize = 3;
pub const PLATEAU_MIN_IMPROVEMENT: f64 = 1e-4;

/// Halves the learning rate after `patience` consecutive epochs whose
/// monitored value (validation accuracy) fails to improve on the best seen
/// by more than `min_improvement`. The rate never increases.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_improvement: f64,
    learning_rate: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(initial_learning_rate: f64) -> Self {
        PlateauScheduler {
            factor: PLATEAU_FACTOR,
            patience: PLATEAU_PATIENCE,
            min_improvement: PLATEAU_MIN_IMPROVEMENT,
            learning_rate: initial_learning_rate,
            best: None,
            stale: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Feeds one epoch's monitored value; returns the learning rate to use
    /// from the next epoch on.
    pub fn update(&mut self, value: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(
                "plateau_update",
                format!("monitored accuracy must lie in [0,1], got {value}"),
            ));
        }
        match self.best {
            Some(best) if value - best <= self.min_improvement => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.learning_rate *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(match self.best {
                    Some(b) => b.max(value),
                    None => value,
                });
                self.stale = 0;
            }
        }
        Ok(self.learning_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn one_param(value: f64) -> (Vec<(String, Tensor)>, Tensor) {
        (
            vec![("p".to_string(), Tensor::scalar(value))],
            Tensor::scalar(value),
        )
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let (spec, mut p) = one_param(1.5);
        let mut adam = AdamState::new(&spec, 1e-4);
        adam.step(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.item().unwrap(), 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (spec, mut p) = one_param(1.0);
        let mut adam = AdamState::new(&spec, 1e-4);
        adam.step(&mut [&mut p], &[Tensor::scalar(0.5)]).unwrap();
        // With t = 1 the bias-corrected update is lr * g / (|g| + eps).
        assert!((p.item().unwrap() - 0.9999000).abs() < 1e-9);
    }

    #[test]
    fn repeated_steps_have_bounded_growth() {
        let (spec, mut p) = one_param(1.0);
        let mut adam = AdamState::new(&spec, 1e-4);
        let before = p.item().unwrap();
        adam.step(&mut [&mut p], &[Tensor::scalar(0.3)]).unwrap();
        let mid = p.item().unwrap();
        adam.step(&mut [&mut p], &[Tensor::scalar(0.3)]).unwrap();
        let after = p.item().unwrap();
        let step1 = (before - mid).abs();
        let step2 = (mid - after).abs();
        assert!(step2 <= step1 * 1.0001, "step1 {step1} step2 {step2}");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (spec, mut p) = one_param(1.0);
        let mut adam = AdamState::new(&spec, 1e-4);
        let err = adam
            .step(&mut [&mut p], &[Tensor::scalar(f64::NAN)])
            .unwrap_err();
        match err {
            Error::NonFinite { context } => assert!(context.contains('p')),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn plateau_keeps_rate_while_improving() {
        let mut s = PlateauScheduler::new(1e-4);
        for v in [0.50, 0.60, 0.70] {
            assert_eq!(s.update(v).unwrap(), 1e-4);
        }
    }

    #[test]
    fn plateau_halves_after_three_stale_epochs() {
        let mut s = PlateauScheduler::new(1e-4);
        assert_eq!(s.update(0.70).unwrap(), 1e-4);
        assert_eq!(s.update(0.70).unwrap(), 1e-4);
        assert_eq!(s.update(0.70005).unwrap(), 1e-4);
        assert_eq!(s.update(0.70008).unwrap(), 5e-5);
    }

    #[test]
    fn six_stale_epochs_halve_twice() {
        let mut s = PlateauScheduler::new(1e-4);
        s.update(0.5).unwrap();
        let mut last = 0.0;
        for _ in 0..6 {
            last = s.update(0.5).unwrap();
        }
        assert_eq!(last, 2.5e-5);
    }

    #[test]
    fn rate_never_increases() {
        let mut s = PlateauScheduler::new(1e-4);
        let mut prev = s.learning_rate();
        let seq = [0.1, 0.5, 0.5, 0.5, 0.5, 0.9, 0.9, 0.9, 0.9, 0.95];
        for v in seq {
            let lr = s.update(v).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn rejects_out_of_range_accuracy() {
        let mut s = PlateauScheduler::new(1e-4);
        assert!(s.update(1.5).is_err());
    }
}
