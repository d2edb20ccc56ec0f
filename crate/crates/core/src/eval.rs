//! Video-level AP/AR and assignment audits.
//!
//! Every prediction slot is one detection: its class is the argmax of the
//! clip-averaged real-class probabilities and its score is one minus the
//! clip-averaged no-object probability. Per class and IoU threshold,
//! detections are greedily matched to ground truth in descending score
//! order (a matched gt is consumed), then precision is interpolated at 101
//! recall points. Precision-recall points are taken only at the end of
//! each run of equal scores, so the result does not depend on how tied
//! detections are ordered.

use serde::{Deserialize, Serialize};

use crate::assignment::{global_instance_assignment, locpro_assignment};
use crate::cost::{average_class_prob, CostConfig};
use crate::error::{Error, Result};
use crate::model::{Clip, Corpus, GroundTruthTrack, Mask, PredictionTrack};

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Predicted cells strictly above this probability count as foreground.
    pub mask_threshold: f64,
    /// Detections kept per clip and class when computing AP.
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mask_threshold: 0.5,
            max_dets: 100,
        }
    }
}

fn binary_iou(gt: &[Mask], pred: &[Mask]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (g, p) in gt.iter().zip(pred) {
        for (&a, &b) in g.data.iter().zip(&p.data) {
            let (a, b) = (a != 0, b != 0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Spatio-temporal IoU: summed per-frame intersections over summed unions,
/// with the prediction binarized above `threshold`.
pub fn video_iou(gt: &GroundTruthTrack, pred: &PredictionTrack, threshold: f64) -> f64 {
    let bin: Vec<Mask> = pred.mask_probs.iter().map(|m| m.binarize_above(threshold)).collect();
    binary_iou(&gt.masks, &bin)
}

#[derive(Debug, Clone, PartialEq)]
struct Detection {
    slot: usize,
    class_id: usize,
    score: f64,
    masks: Vec<Mask>,
}

fn detections(pred: &[PredictionTrack], cfg: &EvalConfig) -> Vec<Detection> {
    pred.iter()
        .enumerate()
        .filter_map(|(slot, p)| {
            let avg = average_class_prob(p);
            let k = avg.len().checked_sub(1)?;
            let class_id = (0..k).fold(0, |best, c| if avg[c] > avg[best] { c } else { best });
            Some(Detection {
                slot,
                class_id,
                score: 1.0 - avg[k],
                masks: p.mask_probs.iter().map(|m| m.binarize_above(cfg.mask_threshold)).collect(),
            })
        })
        .collect()
}

/// Per-clip, per-class greedy matching outcome at every threshold.
struct ClassClip {
    scores: Vec<f64>,
    /// `tp[thr][d]` for detections in canonical order.
    tp: Vec<Vec<bool>>,
}

fn match_class_clip(gts: &[&GroundTruthTrack], dets: &[&Detection], max_dets: usize) -> ClassClip {
    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| binary_iou(&g.masks, &d.masks)).collect())
        .collect();
    let best = |row: &[f64]| row.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // score first; ties go to the better-overlapping detection, then to content
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(best(&ious[b]).total_cmp(&best(&ious[a])))
            .then_with(|| {
                let (mut ra, mut rb) = (ious[a].clone(), ious[b].clone());
                ra.sort_by(|x, y| y.total_cmp(x));
                rb.sort_by(|x, y| y.total_cmp(x));
                rb.iter().zip(&ra).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(dets[a].slot.cmp(&dets[b].slot))
    });
    order.truncate(max_dets);

    let tp = IOU_THRESHOLDS
        .iter()
        .map(|&thr| {
            let mut taken = vec![false; gts.len()];
            order
                .iter()
                .map(|&d| {
                    let mut pick: Option<usize> = None;
                    for (g, &iou) in ious[d].iter().enumerate() {
                        if taken[g] || iou < thr {
                            continue;
                        }
                        if pick.is_none_or(|p| iou > ious[d][p]) {
                            pick = Some(g);
                        }
                    }
                    if let Some(g) = pick {
                        taken[g] = true;
                    }
                    pick.is_some()
                })
                .collect()
        })
        .collect();
    ClassClip {
        scores: order.iter().map(|&d| dets[d].score).collect(),
        tp,
    }
}

/// 101-point interpolated AP from `(score, is_tp)` pairs.
fn interpolated_ap(mut hits: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_end = hits.get(i + 1).is_none_or(|next| next.0 != score);
        if group_end {
            recall.push(tp as f64 / n_gt as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        if let Some(i) = recall.iter().position(|&rc| rc >= level) {
            sum += precision[i];
        }
    }
    sum / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub clip: usize,
    pub n_gt: usize,
    pub gia_cost: f64,
    pub locpro_cost: f64,
    pub pair_agreement: f64,
    pub gia_pairs: Vec<(usize, usize)>,
    pub locpro_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub mean_gia_cost: f64,
    pub mean_locpro_cost: f64,
    pub mean_pair_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub ap_per_threshold: Vec<f64>,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
    pub audit: AuditReport,
}

/// AP/AR metrics only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApMetrics {
    pub ap_per_threshold: Vec<f64>,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

fn clip_predictions(index: usize, clip: &Clip) -> Result<&[PredictionTrack]> {
    clip.pred.as_deref().ok_or(Error::MissingPredictions(index))
}

pub fn compute_metrics(corpus: &Corpus, cfg: &EvalConfig) -> Result<ApMetrics> {
    let mut classes: Vec<usize> = corpus.clips.iter().flat_map(|c| c.gt.iter().map(|g| g.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();

    let per_clip_dets = corpus
        .clips
        .iter()
        .enumerate()
        .map(|(i, c)| Ok(detections(clip_predictions(i, c)?, cfg)))
        .collect::<Result<Vec<_>>>()?;

    let n_thr = IOU_THRESHOLDS.len();
    let mut ap = vec![vec![0.0; classes.len()]; n_thr];
    let mut ar1 = vec![vec![0.0; classes.len()]; n_thr];
    let mut ar10 = vec![vec![0.0; classes.len()]; n_thr];

    for (ci, &class) in classes.iter().enumerate() {
        let mut hits: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n_thr];
        let mut tp_at = [vec![0usize; n_thr], vec![0usize; n_thr]];
        let mut n_gt = 0;
        for (clip, dets) in corpus.clips.iter().zip(&per_clip_dets) {
            let gts: Vec<&GroundTruthTrack> = clip.gt.iter().filter(|g| g.class_id == class).collect();
            n_gt += gts.len();
            let mine: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
            let matched = match_class_clip(&gts, &mine, cfg.max_dets);
            for t in 0..n_thr {
                for (d, &hit) in matched.tp[t].iter().enumerate() {
                    hits[t].push((matched.scores[d], hit));
                }
                for (slot, k) in [1usize, 10].into_iter().enumerate() {
                    tp_at[slot][t] += matched.tp[t].iter().take(k).filter(|&&h| h).count();
                }
            }
        }
        for t in 0..n_thr {
            ap[t][ci] = interpolated_ap(std::mem::take(&mut hits[t]), n_gt);
            ar1[t][ci] = tp_at[0][t] as f64 / n_gt as f64;
            ar10[t][ci] = tp_at[1][t] as f64 / n_gt as f64;
        }
    }

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let ap_per_threshold: Vec<f64> = ap.iter().map(|row| mean(row)).collect();
    let mean_grid = |g: &[Vec<f64>]| mean(&g.iter().map(|row| mean(row)).collect::<Vec<_>>());
    Ok(ApMetrics {
        ap: mean(&ap_per_threshold),
        ap50: ap_per_threshold[0],
        ap75: ap_per_threshold[5],
        ar1: mean_grid(&ar1),
        ar10: mean_grid(&ar10),
        ap_per_threshold,
    })
}

pub fn audit_clip(index: usize, clip: &Clip, cost: &CostConfig) -> Result<AuditRow> {
    let pred = clip_predictions(index, clip)?;
    let gia = global_instance_assignment(&clip.gt, pred, cost)?;
    let loc = locpro_assignment(&clip.gt, pred, cost)?;
    let same = gia.pairs.iter().zip(&loc.pairs).filter(|(a, b)| a == b).count();
    Ok(AuditRow {
        clip: index,
        n_gt: clip.gt.len(),
        gia_cost: gia.total_cost,
        locpro_cost: loc.total_cost,
        pair_agreement: if gia.pairs.is_empty() {
            1.0
        } else {
            same as f64 / gia.pairs.len() as f64
        },
        gia_pairs: gia.pairs,
        locpro_pairs: loc.pairs,
    })
}

pub fn summarize_audit(rows: Vec<AuditRow>) -> AuditReport {
    let n = rows.len().max(1) as f64;
    AuditReport {
        mean_gia_cost: rows.iter().map(|r| r.gia_cost).sum::<f64>() / n,
        mean_locpro_cost: rows.iter().map(|r| r.locpro_cost).sum::<f64>() / n,
        mean_pair_agreement: if rows.is_empty() {
            1.0
        } else {
            rows.iter().map(|r| r.pair_agreement).sum::<f64>() / n
        },
        rows,
    }
}

pub fn audit_assignments(corpus: &Corpus, cost: &CostConfig) -> Result<AuditReport> {
    let rows = corpus
        .clips
        .iter()
        .enumerate()
        .map(|(i, c)| audit_clip(i, c, cost))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_audit(rows))
}

pub fn compute_ap(corpus: &Corpus, cfg: &EvalConfig, cost: &CostConfig) -> Result<EvalReport> {
    let m = compute_metrics(corpus, cfg)?;
    let audit = audit_assignments(corpus, cost)?;
    Ok(EvalReport {
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        ap_per_threshold: m.ap_per_threshold,
        ap: m.ap,
        ap50: m.ap50,
        ap75: m.ap75,
        ar1: m.ar1,
        ar10: m.ar10,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SoftMask;

    fn track(class_id: usize, masks: Vec<Mask>) -> GroundTruthTrack {
        GroundTruthTrack { class_id, masks }
    }

    fn pred_from(masks: &[Mask], class_probs: Vec<f64>) -> PredictionTrack {
        PredictionTrack {
            class_probs: vec![class_probs; masks.len()],
            mask_probs: masks.iter().map(SoftMask::from).collect(),
        }
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let m = Mask::from_fn(4, 4, |i, _| i < 2);
        let g = track(0, vec![m.clone(), m.clone()]);
        assert_eq!(video_iou(&g, &pred_from(&g.masks, vec![1.0, 0.0]), 0.5), 1.0);
        let other = Mask::from_fn(4, 4, |i, _| i >= 2);
        assert_eq!(video_iou(&g, &pred_from(&[other.clone(), other], vec![1.0, 0.0]), 0.5), 0.0);
    }

    #[test]
    fn iou_half_overlap_is_one_third() {
        // |gt| = |pred| = 100, overlap 50 -> union 150
        let gt = Mask::from_fn(10, 20, |_, j| j < 10);
        let pred = Mask::from_fn(10, 20, |_, j| (5..15).contains(&j));
        for t in 1..=4 {
            let g = track(0, vec![gt.clone(); t]);
            let p = pred_from(&vec![pred.clone(); t], vec![1.0, 0.0]);
            assert!((video_iou(&g, &p, 0.5) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolation_walk() {
        // tp, fp, tp over 2 gts: precision envelope 1 up to recall .5, 2/3 after
        let ap = interpolated_ap(vec![(0.9, true), (0.8, false), (0.7, true)], 2);
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-15);
        // a tied tp/fp pair yields one point regardless of order
        let a = interpolated_ap(vec![(0.5, true), (0.5, false)], 1);
        let b = interpolated_ap(vec![(0.5, false), (0.5, true)], 1);
        assert_eq!(a, b);
        assert_eq!(a, 0.5);
    }

    #[test]
    fn missing_predictions_rejected() {
        let corpus = Corpus {
            header: None,
            spec: crate::model::ClipSpec {
                frames: 1,
                height: 2,
                width: 2,
                stride: 1,
                num_classes: 1,
                num_slots: 1,
                embed_dim: 1,
            },
            seed: 0,
            clips: vec![Clip {
                gt: vec![track(0, vec![Mask::ones(2, 2)])],
                pred: None,
            }],
        };
        assert!(matches!(compute_metrics(&corpus, &EvalConfig::default()), Err(Error::MissingPredictions(0))));
    }
}
