//! Supervision terms: balanced BCE on the shadow head, L1 reconstruction,
//! the shadow-free-region background loss, and the weighted objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Image, RgbPrediction, ShadowMask, ShadowProbMap};

/// How the balanced BCE aggregates over pixels. `Sum` is the plain
/// weighted sum; `Mean` divides it by the pixel count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BbceReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the joint term `L_re + L_bg`.
    pub alpha: f64,
    /// Weight on the style term.
    pub beta: f64,
    /// Probabilities are clamped to `[epsilon, 1 - epsilon]` before the log.
    pub epsilon: f64,
    pub bbce_reduction: BbceReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.2,
            beta: 0.1,
            epsilon: 1e-7,
            bbce_reduction: BbceReduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config("epsilon must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Balanced BCE value and gradient w.r.t. `pred`.
///
/// Each class term is weighted by the other class's pixel fraction; a
/// single-class mask therefore zeroes the present class's term.
pub(crate) fn bbce_raw(pred: &[f64], gt: &[f64], eps: f64, reduction: BbceReduction) -> (f64, Vec<f64>) {
    let n = gt.len() as f64;
    let n_pos = gt.iter().filter(|&&g| g >= 0.5).count() as f64;
    let n_neg = n - n_pos;
    let (w_pos, w_neg) = (n_neg / n, n_pos / n);
    let norm = match reduction {
        BbceReduction::Sum => 1.0,
        BbceReduction::Mean => 1.0 / n,
    };
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        let clamped = p < eps || p > 1.0 - eps;
        let c = p.clamp(eps, 1.0 - eps);
        loss -= w_pos * g * c.ln() + w_neg * (1.0 - g) * (1.0 - c).ln();
        grad.push(if clamped {
            0.0
        } else {
            -norm * (w_pos * g / c - w_neg * (1.0 - g) / (1.0 - c))
        });
    }
    (loss * norm, grad)
}

pub(crate) fn mae_raw(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| sign(p - t) / n).collect();
    (loss, grad)
}

/// `MAE(p_bg ⊗ (1 − p_sd), masked_target)` with `p_sd` broadcast over the
/// three channels. Returns the value and gradients for `p_bg` and `p_sd`.
pub(crate) fn background_raw(p_bg: &[f64], p_sd: &[f64], masked_target: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let plane = p_sd.len();
    let n = p_bg.len() as f64;
    let mut loss = 0.0;
    let mut g_bg = vec![0.0; p_bg.len()];
    let mut g_sd = vec![0.0; plane];
    for i in 0..p_bg.len() {
        let keep = 1.0 - p_sd[i % plane];
        let diff = p_bg[i] * keep - masked_target[i];
        loss += diff.abs();
        let d = sign(diff) / n;
        g_bg[i] = d * keep;
        g_sd[i % plane] -= d * p_bg[i];
    }
    (loss / n, g_bg, g_sd)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `image ⊗ (1 − gt)` flattened channel-major.
pub(crate) fn shadow_free_target(image: &Image, gt: &ShadowMask) -> Vec<f64> {
    let keep = gt.values();
    let plane = keep.len();
    image
        .tensor()
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1.0 - keep[i % plane]))
        .collect()
}

fn check_plane(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]));
    }
    Ok(())
}

/// Balanced binary cross-entropy, summed over pixels.
pub fn bbce(pred: &ShadowProbMap, gt: &ShadowMask, epsilon: f64) -> Result<f64> {
    bbce_with(pred, gt, epsilon, BbceReduction::Sum)
}

pub fn bbce_with(pred: &ShadowProbMap, gt: &ShadowMask, epsilon: f64, reduction: BbceReduction) -> Result<f64> {
    check_plane((pred.height(), pred.width()), (gt.height(), gt.width()))?;
    Ok(bbce_raw(pred.values(), gt.values(), epsilon, reduction).0)
}

/// Mean absolute error over every pixel-channel position.
pub fn mae(pred: &RgbPrediction, target: &Image) -> Result<f64> {
    pred.tensor().expect_shape(target.tensor().shape())?;
    Ok(mae_raw(pred.tensor().data(), target.tensor().data()).0)
}

/// L1 distance between the predicted background outside predicted shadow
/// and the input image outside ground-truth shadow.
pub fn background_loss(p_bg: &RgbPrediction, p_sd: &ShadowProbMap, image: &Image, gt: &ShadowMask) -> Result<f64> {
    let dims = (p_bg.height(), p_bg.width());
    check_plane(dims, (p_sd.height(), p_sd.width()))?;
    check_plane(dims, (image.height(), image.width()))?;
    check_plane(dims, (gt.height(), gt.width()))?;
    let target = shadow_free_target(image, gt);
    Ok(background_raw(p_bg.tensor().data(), p_sd.values(), &target).0)
}

/// `L_sd + α (L_re + L_bg) + β L_style`.
pub fn total_loss(l_sd: f64, l_re: f64, l_bg: f64, l_style: f64, weights: &LossWeights) -> f64 {
    l_sd + weights.alpha * (l_re + l_bg) + weights.beta * l_style
}
