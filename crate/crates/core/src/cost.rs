//! Matching costs and the clip-level training loss.
//!
//! Classification uses true cross entropy on the (clip-averaged) class
//! probabilities; mask terms are BCE averaged over cells and soft dice over
//! the whole stacked volume. Cross-entropy style terms are floored at zero so
//! the `+ eps` clamp can never produce a tiny negative cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroundTruthTrack, Mask, PredictionTrack, SoftMask};
use crate::assignment::Assignment;

pub const DEFAULT_LOG_EPS: f64 = 1e-12;
pub const DEFAULT_DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_bce: 5.0,
            lambda_dice: 5.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_cls: f64, lambda_bce: f64, lambda_dice: f64) -> Self {
        LossWeights {
            lambda_cls,
            lambda_bce,
            lambda_dice,
        }
    }

    pub fn check(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss weights plus the numerical constants of the individual terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub weights: LossWeights,
    #[serde(default = "default_eps")]
    pub log_eps: f64,
    #[serde(default = "default_smooth")]
    pub dice_smooth: f64,
}

fn default_eps() -> f64 {
    DEFAULT_LOG_EPS
}

fn default_smooth() -> f64 {
    DEFAULT_DICE_SMOOTH
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig::with_weights(LossWeights::default())
    }
}

impl CostConfig {
    pub fn with_weights(weights: LossWeights) -> Self {
        CostConfig {
            weights,
            log_eps: DEFAULT_LOG_EPS,
            dice_smooth: DEFAULT_DICE_SMOOTH,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.weights.check()?;
        if !(self.log_eps > 0.0 && self.log_eps.is_finite()) {
            return Err(Error::config("log_eps", "must be finite and > 0"));
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::config("dice_smooth", "must be finite and > 0"));
        }
        Ok(())
    }
}

pub fn average_class_prob(track: &PredictionTrack) -> Vec<f64> {
    let n = track.class_probs.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; n];
    for probs in &track.class_probs {
        for (a, p) in acc.iter_mut().zip(probs) {
            *a += p;
        }
    }
    let t = track.class_probs.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= t);
    acc
}

pub fn ce_cost(gt_class: usize, prob: &[f64], eps: f64) -> f64 {
    (-(prob[gt_class] + eps).ln()).max(0.0)
}

fn bce_sum(gt: impl Iterator<Item = f64>, pred: impl Iterator<Item = f64>, eps: f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (y, p) in gt.zip(pred) {
        sum -= y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln();
        n += 1;
    }
    (sum, n)
}

fn dice_from_iter(gt: impl Iterator<Item = f64>, pred: impl Iterator<Item = f64>, smooth: f64) -> f64 {
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for (y, p) in gt.zip(pred) {
        inter += y * p;
        sy += y;
        sp += p;
    }
    1.0 - (2.0 * inter + smooth) / (sy + sp + smooth)
}

fn check_stacks(gt: &[Mask], pred: &[SoftMask]) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::Shape(format!("{} gt frames vs {} predicted frames", gt.len(), pred.len())));
    }
    for (t, (g, p)) in gt.iter().zip(pred).enumerate() {
        if g.h != p.h || g.w != p.w || g.data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "frame {t}: gt {}x{} vs prediction {}x{}",
                g.h, g.w, p.h, p.w
            )));
        }
    }
    Ok(())
}

fn cells<'a>(gt: &'a [Mask]) -> impl Iterator<Item = f64> + 'a {
    gt.iter().flat_map(Mask::values)
}

fn soft_cells<'a>(pred: &'a [SoftMask]) -> impl Iterator<Item = f64> + 'a {
    pred.iter().flat_map(|m| m.data.iter().copied())
}

/// Mean binary cross entropy over every cell of every frame.
pub fn bce_cost(gt: &[Mask], pred: &[SoftMask], eps: f64) -> Result<f64> {
    check_stacks(gt, pred)?;
    let (sum, n) = bce_sum(cells(gt), soft_cells(pred), eps);
    Ok(if n == 0 { 0.0 } else { (sum / n as f64).max(0.0) })
}

/// Soft dice over the concatenated clip volume.
pub fn dice_cost(gt: &[Mask], pred: &[SoftMask], smooth: f64) -> Result<f64> {
    check_stacks(gt, pred)?;
    Ok(dice_from_iter(cells(gt), soft_cells(pred), smooth))
}

fn check_tracks(gt: &GroundTruthTrack, pred: &PredictionTrack) -> Result<()> {
    if pred.class_probs.len() != pred.mask_probs.len() {
        return Err(Error::Shape(format!(
            "prediction has {} class frames but {} mask frames",
            pred.class_probs.len(),
            pred.mask_probs.len()
        )));
    }
    if let Some(p) = pred.class_probs.iter().find(|p| gt.class_id >= p.len()) {
        return Err(Error::Shape(format!(
            "gt class {} outside probability vector of length {}",
            gt.class_id,
            p.len()
        )));
    }
    check_stacks(&gt.masks, &pred.mask_probs)
}

/// Single-frame matching cost; `t` is the 1-based frame index.
pub fn frame_matching_cost(
    gt: &GroundTruthTrack,
    pred: &PredictionTrack,
    t: usize,
    cfg: &CostConfig,
) -> Result<f64> {
    check_tracks(gt, pred)?;
    if t == 0 || t > gt.masks.len() {
        return Err(Error::Shape(format!("frame {t} outside [1, {}]", gt.masks.len())));
    }
    let i = t - 1;
    let w = &cfg.weights;
    let g = std::slice::from_ref(&gt.masks[i]);
    let p = std::slice::from_ref(&pred.mask_probs[i]);
    Ok(w.lambda_cls * ce_cost(gt.class_id, &pred.class_probs[i], cfg.log_eps)
        + w.lambda_bce * bce_cost(g, p, cfg.log_eps)?
        + w.lambda_dice * dice_cost(g, p, cfg.dice_smooth)?)
}

/// Whole-clip matching cost between one gt track and one prediction slot.
pub fn global_matching_cost(gt: &GroundTruthTrack, pred: &PredictionTrack, cfg: &CostConfig) -> Result<f64> {
    check_tracks(gt, pred)?;
    let w = &cfg.weights;
    let avg = average_class_prob(pred);
    Ok(w.lambda_cls * ce_cost(gt.class_id, &avg, cfg.log_eps)
        + w.lambda_bce * bce_cost(&gt.masks, &pred.mask_probs, cfg.log_eps)?
        + w.lambda_dice * dice_cost(&gt.masks, &pred.mask_probs, cfg.dice_smooth)?)
}

/// Clip loss for a given assignment: matched pairs pay the global matching
/// cost, unmatched slots pay the classification term toward no-object.
pub fn overall_loss(
    gt: &[GroundTruthTrack],
    pred: &[PredictionTrack],
    assignment: &Assignment,
    cfg: &CostConfig,
) -> Result<f64> {
    let mut matched = vec![false; pred.len()];
    let mut loss = 0.0;
    for &(g, p) in &assignment.pairs {
        if g >= gt.len() || p >= pred.len() || matched[p] {
            return Err(Error::InvalidAssignment { gt: g, pred: p });
        }
        matched[p] = true;
        loss += global_matching_cost(&gt[g], &pred[p], cfg)?;
    }
    for (p, track) in pred.iter().enumerate().filter(|(p, _)| !matched[*p]) {
        let avg = average_class_prob(track);
        if avg.is_empty() {
            return Err(Error::Shape(format!("prediction {p} has no frames")));
        }
        let no_object = avg.len() - 1;
        loss += cfg.weights.lambda_cls * ce_cost(no_object, &avg, cfg.log_eps);
    }
    Ok(loss)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Analytic gradient of `lambda_bce * bce + lambda_dice * dice` with respect
/// to the mask logits, where predictions are `sigmoid(logits)`.
///
/// `logits` holds one row-major `h x w` array per frame; the result has the
/// same layout. The `+ eps` terms are differentiated exactly.
pub fn mask_loss_grad(gt: &[Mask], logits: &[Vec<f64>], cfg: &CostConfig) -> Result<Vec<Vec<f64>>> {
    if gt.len() != logits.len() {
        return Err(Error::Shape(format!("{} gt frames vs {} logit frames", gt.len(), logits.len())));
    }
    for (t, (g, z)) in gt.iter().zip(logits).enumerate() {
        if g.data.len() != z.len() {
            return Err(Error::Shape(format!("frame {t}: {} cells vs {} logits", g.data.len(), z.len())));
        }
    }
    let eps = cfg.log_eps;
    let smooth = cfg.dice_smooth;
    let w = &cfg.weights;
    let n: usize = logits.iter().map(Vec::len).sum();
    if n == 0 {
        return Ok(logits.iter().map(|_| Vec::new()).collect());
    }

    let probs: Vec<Vec<f64>> = logits.iter().map(|z| z.iter().map(|&x| sigmoid(x)).collect()).collect();
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for (g, p) in gt.iter().zip(&probs) {
        for (y, &pi) in g.values().zip(p) {
            inter += y * pi;
            sy += y;
            sp += pi;
        }
    }
    let num = 2.0 * inter + smooth;
    let den = sy + sp + smooth;

    let inv_n = 1.0 / n as f64;
    Ok(gt
        .iter()
        .zip(&probs)
        .map(|(g, p)| {
            g.values()
                .zip(p)
                .map(|(y, &pi)| {
                    let d_bce = inv_n * (-y / (pi + eps) + (1.0 - y) / (1.0 - pi + eps));
                    let d_dice = -(2.0 * y * den - num) / (den * den);
                    (w.lambda_bce * d_bce + w.lambda_dice * d_dice) * pi * (1.0 - pi)
                })
                .collect()
        })
        .collect())
}

/// `lambda_bce * bce + lambda_dice * dice` evaluated at `sigmoid(logits)`.
pub fn mask_loss_from_logits(gt: &[Mask], logits: &[Vec<f64>], cfg: &CostConfig) -> Result<f64> {
    let pred: Vec<SoftMask> = gt
        .iter()
        .zip(logits)
        .map(|(g, z)| SoftMask {
            h: g.h,
            w: g.w,
            data: z.iter().map(|&x| sigmoid(x)).collect(),
        })
        .collect();
    // the floor in bce_cost is inactive away from saturated logits
    let (sum, n) = bce_sum(cells(gt), soft_cells(&pred), cfg.log_eps);
    check_stacks(gt, &pred)?;
    let bce = if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(cfg.weights.lambda_bce * bce + cfg.weights.lambda_dice * dice_cost(gt, &pred, cfg.dice_smooth)?)
}
