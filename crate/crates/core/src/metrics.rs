//! Confusion counting and balanced error rate.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ShadowMask, ShadowProbMap};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Adds one pixel outcome.
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    fn recalls(&self) -> (f64, f64) {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        let shadow = if pos == 0 {
            log::warn!("no shadow pixels in evaluated set; shadow recall taken as 1");
            1.0
        } else {
            self.tp as f64 / pos as f64
        };
        let free = if neg == 0 {
            log::warn!("no shadow-free pixels in evaluated set; non-shadow recall taken as 1");
            1.0
        } else {
            self.tn as f64 / neg as f64
        };
        (shadow, free)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + rhs.tp,
            tn: self.tn + rhs.tn,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), Add::add)
    }
}

/// Tallies predictions binarised at `threshold` (`p ≥ threshold` is shadow).
pub fn confusion(pred: &ShadowProbMap, gt: &ShadowMask, threshold: f64) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(&[gt.height(), gt.width()], &[pred.height(), pred.width()]));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        c.record(p >= threshold, g == 1.0);
    }
    Ok(c)
}

/// Balanced error rate in percent.
///
/// `(1 − ½(TP/(TP+FN) + TN/(TN+FP))) × 100`, evaluated as the mean of the
/// two region error rates so that identity holds bit-for-bit.
pub fn ber(c: &ConfusionCounts) -> f64 {
    let (shadow, free) = region_error_rates(c);
    0.5 * (shadow + free)
}

/// `(shadow error, non-shadow error)` in percent.
pub fn region_error_rates(c: &ConfusionCounts) -> (f64, f64) {
    let (shadow, free) = c.recalls();
    ((1.0 - shadow) * 100.0, (1.0 - free) * 100.0)
}

/// Dataset-level summary written by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub ber: f64,
    pub shadow_error: f64,
    pub non_shadow_error: f64,
    pub image_count: usize,
    pub threshold: f64,
    pub accumulation: String,
    pub crf_applied: bool,
    pub counts: ConfusionCounts,
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl MetricsReport {
    /// Report from counts pooled over the whole dataset.
    pub fn pooled(dataset: impl Into<String>, counts: ConfusionCounts, image_count: usize, threshold: f64, crf_applied: bool) -> Self {
        let (shadow_error, non_shadow_error) = region_error_rates(&counts);
        MetricsReport {
            dataset: dataset.into(),
            ber: ber(&counts),
            shadow_error,
            non_shadow_error,
            image_count,
            threshold,
            accumulation: "pooled".into(),
            crf_applied,
            counts,
            skipped: Vec::new(),
        }
    }
}
