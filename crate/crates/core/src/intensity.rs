//! Adaptive noise-intensity control for the discriminator and classifier.
//!
//! Both intensities move only on iterations that are multiples of the
//! update period. The discriminator intensity follows the sign of the
//! measured overfitting statistic `r_d` against its target; the classifier
//! intensity rises linearly with training progress up to a cap.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const UPDATE_PERIOD: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntensityError {
    #[error("cannot record overfitting statistic from an empty batch")]
    EmptyBatch,
    #[error("controller kind mismatch: expected {expected:?}")]
    WrongKind { expected: ControllerKind },
    #[error("invalid controller parameter `{name}` = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    Discriminator,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityController {
    kind: ControllerKind,
    value: f64,
    max_value: f64,
    step_const: f64,
    d_target: f64,
    k_max: usize,
    update_period: usize,
    /// Adjustments applied so far; the classifier value is derived from it
    /// so that no floating drift accumulates.
    adjustments: usize,
}

/// `sign` with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl IntensityController {
    pub fn discriminator(step_const: f64, d_target: f64, max_value: f64) -> Result<Self, IntensityError> {
        if !(step_const > 0.0 && step_const.is_finite()) {
            return Err(IntensityError::InvalidParameter { name: "step_const", value: step_const });
        }
        if !(0.0..=1.0).contains(&max_value) || max_value == 0.0 {
            return Err(IntensityError::InvalidParameter { name: "max_d", value: max_value });
        }
        if !(-1.0..=1.0).contains(&d_target) {
            return Err(IntensityError::InvalidParameter { name: "d_target", value: d_target });
        }
        Ok(Self {
            kind: ControllerKind::Discriminator,
            value: 0.0,
            max_value,
            step_const,
            d_target,
            k_max: 0,
            update_period: UPDATE_PERIOD,
            adjustments: 0,
        })
    }

    pub fn classifier(k_max: usize, max_value: f64) -> Result<Self, IntensityError> {
        if k_max == 0 {
            return Err(IntensityError::InvalidParameter { name: "k_max", value: 0.0 });
        }
        if !(0.0..=1.0).contains(&max_value) || max_value == 0.0 {
            return Err(IntensityError::InvalidParameter { name: "max_c", value: max_value });
        }
        Ok(Self {
            kind: ControllerKind::Classifier,
            value: 0.0,
            max_value,
            step_const: 0.0,
            d_target: 0.0,
            k_max,
            update_period: UPDATE_PERIOD,
            adjustments: 0,
        })
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn max_value(&self) -> f64 {
        self.max_value
    }

    pub fn adjustments(&self) -> usize {
        self.adjustments
    }

    /// Restores a value saved by a checkpoint.
    pub fn restore(&mut self, value: f64, adjustments: usize) {
        self.value = value.clamp(0.0, self.max_value);
        self.adjustments = adjustments;
    }

    fn is_update(&self, k: usize) -> bool {
        k % self.update_period == 0
    }

    /// Applies `T ← clamp(T + sign(r_d − d_target)·const, 0, T_max)` when
    /// `k` is a multiple of the update period.
    pub fn step_discriminator(&mut self, r_d: f64, k: usize) -> Result<f64, IntensityError> {
        if self.kind != ControllerKind::Discriminator {
            return Err(IntensityError::WrongKind { expected: ControllerKind::Discriminator });
        }
        if self.is_update(k) {
            self.value = (self.value + sign(r_d - self.d_target) * self.step_const).clamp(0.0, self.max_value);
            self.adjustments += 1;
        }
        Ok(self.value)
    }

    /// Applies `T ← min(T + period/k_max, T_max)` when `k` is a multiple
    /// of the update period.
    pub fn step_classifier(&mut self, k: usize) -> Result<f64, IntensityError> {
        if self.kind != ControllerKind::Classifier {
            return Err(IntensityError::WrongKind { expected: ControllerKind::Classifier });
        }
        if self.is_update(k) && k > 0 {
            self.adjustments += 1;
            let raw = (self.update_period * self.adjustments) as f64 / self.k_max as f64;
            self.value = raw.min(self.max_value);
        }
        Ok(self.value)
    }
}

/// Running estimate of discriminator overfitting: the mean over a window
/// of recent batches of `mean(sign(logit))` on noised real samples.
#[derive(Clone, Debug, PartialEq)]
pub struct OverfitEstimator {
    window: VecDeque<f64>,
    capacity: usize,
}

impl Default for OverfitEstimator {
    fn default() -> Self {
        Self::new(16)
    }
}

impl OverfitEstimator {
    pub fn new(capacity: usize) -> Self {
        Self { window: VecDeque::with_capacity(capacity), capacity: capacity.max(1) }
    }

    pub fn record_real_logits(&mut self, logits: &Tensor) -> Result<f64, IntensityError> {
        if logits.is_empty() {
            return Err(IntensityError::EmptyBatch);
        }
        let batch = logits.data().iter().map(|&v| sign(v)).sum::<f64>() / logits.len() as f64;
        self.push(batch);
        Ok(batch)
    }

    pub fn push(&mut self, batch_value: f64) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(batch_value);
    }

    /// Current `r_d`; zero before any batch has been recorded.
    pub fn r_d(&self) -> f64 {
        if self.window.is_empty() {
            return 0.0;
        }
        self.window.iter().sum::<f64>() / self.window.len() as f64
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Closed form of the classifier trajectory: `min(cap, 4·⌊k/4⌋ / k_max)`.
pub fn classifier_closed_form(k: usize, k_max: usize, cap: f64) -> f64 {
    let steps = k / UPDATE_PERIOD;
    ((UPDATE_PERIOD * steps) as f64 / k_max as f64).min(cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_value_is_mean_sign() {
        let mut est = OverfitEstimator::default();
        let pos = Tensor::vector(vec![0.1, 2.0, 5.0]);
        assert_eq!(est.record_real_logits(&pos).unwrap(), 1.0);
        let sym = Tensor::vector(vec![-1.5, 1.5]);
        assert_eq!(est.record_real_logits(&sym).unwrap(), 0.0);
        assert_eq!(est.record_real_logits(&Tensor::vector(vec![])), Err(IntensityError::EmptyBatch));
    }

    #[test]
    fn r_d_is_window_mean() {
        let mut est = OverfitEstimator::new(4);
        for v in [1.0, 0.5, 0.3, 0.6] {
            est.push(v);
        }
        assert!((est.r_d() - 0.6).abs() < 1e-15);
        est.push(-1.0);
        assert_eq!(est.window().collect::<Vec<_>>(), vec![0.5, 0.3, 0.6, -1.0]);
    }

    #[test]
    fn discriminator_step_follows_sign() {
        let mut c = IntensityController::discriminator(0.02, 0.6, 1.0).unwrap();
        c.restore(0.10, 0);
        assert!((c.step_discriminator(0.7, 4).unwrap() - 0.12).abs() < 1e-15);
        let before = c.value();
        assert_eq!(c.step_discriminator(0.6, 8).unwrap(), before);
        assert_eq!(c.step_discriminator(0.9, 9).unwrap(), before);
    }

    #[test]
    fn discriminator_clamps_both_ends() {
        let mut c = IntensityController::discriminator(0.02, 0.6, 1.0).unwrap();
        c.restore(0.99, 0);
        assert_eq!(c.step_discriminator(0.8, 4).unwrap(), 1.0);
        c.restore(0.01, 0);
        assert_eq!(c.step_discriminator(0.0, 8).unwrap(), 0.0);
    }

    #[test]
    fn classifier_increments_by_period_over_k_max() {
        let mut c = IntensityController::classifier(400, 0.3).unwrap();
        assert_eq!(c.step_classifier(0).unwrap(), 0.0);
        for k in 1..4 {
            assert_eq!(c.step_classifier(k).unwrap(), 0.0);
        }
        assert_eq!(c.step_classifier(4).unwrap(), 0.01);
        for k in 5..=400 {
            c.step_classifier(k).unwrap();
        }
        assert_eq!(c.value(), 0.3);
    }

    #[test]
    fn wrong_kind_rejected() {
        let mut c = IntensityController::classifier(400, 0.3).unwrap();
        assert!(c.step_discriminator(0.7, 4).is_err());
        let mut d = IntensityController::discriminator(0.02, 0.6, 1.0).unwrap();
        assert!(d.step_classifier(4).is_err());
    }
}
