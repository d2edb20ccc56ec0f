#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tcovis_core::model::{GroundTruthTrack, Mask, PredictionTrack, SoftMask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

pub fn random_soft(rng: &mut impl Rng, h: usize, w: usize) -> SoftMask {
    SoftMask {
        h,
        w,
        data: (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

pub fn random_probs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn random_gt(rng: &mut impl Rng, t: usize, h: usize, w: usize, k: usize) -> GroundTruthTrack {
    let mut masks: Vec<Mask> = (0..t).map(|_| random_mask(rng, h, w, 0.4)).collect();
    masks[0].set(0, 0, true);
    GroundTruthTrack {
        class_id: rng.gen_range(0..k),
        masks,
    }
}

pub fn random_pred(rng: &mut impl Rng, t: usize, h: usize, w: usize, k: usize) -> PredictionTrack {
    PredictionTrack {
        class_probs: (0..t).map(|_| random_probs(rng, k + 1)).collect(),
        mask_probs: (0..t).map(|_| random_soft(rng, h, w)).collect(),
    }
}

/// Plain nested-loop BCE, cell by cell.
pub fn naive_bce(gt: &[Mask], pred: &[SoftMask], eps: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for t in 0..gt.len() {
        for i in 0..gt[t].h {
            for j in 0..gt[t].w {
                let y = if gt[t].get(i, j) { 1.0 } else { 0.0 };
                let p = pred[t].get(i, j);
                sum += -(y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln());
                n += 1.0;
            }
        }
    }
    sum / n
}

pub fn naive_dice(gt: &[Mask], pred: &[SoftMask], smooth: f64) -> f64 {
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for t in 0..gt.len() {
        for i in 0..gt[t].h {
            for j in 0..gt[t].w {
                let y = if gt[t].get(i, j) { 1.0 } else { 0.0 };
                let p = pred[t].get(i, j);
                inter += y * p;
                sy += y;
                sp += p;
            }
        }
    }
    1.0 - (2.0 * inter + smooth) / (sy + sp + smooth)
}

/// Lexicographically ordered enumeration of all injections rows -> cols.
pub fn all_injections(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    fn go(row: usize, rows: usize, cols: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if row == rows {
            out.push(cur.clone());
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                go(row + 1, rows, cols, used, cur, out);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, rows, cols, &mut vec![false; cols], &mut Vec::new(), &mut out);
    out
}

/// Straight-line multi-head attention over nested vectors.
///
/// Returns `(output, weights[head][query][key])`.
#[allow(clippy::too_many_arguments)]
pub fn naive_mha(
    q_in: &[Vec<f64>],
    k_in: &[Vec<f64>],
    v_in: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    wo: &[Vec<f64>],
    heads: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let c = wq.len();
    let proj = |x: &[Vec<f64>], w: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| (0..c).map(|o| (0..c).map(|i| row[i] * w[i][o]).sum()).collect())
            .collect()
    };
    let (q, k, v) = (proj(q_in, wq), proj(k_in, wk), proj(v_in, wv));
    let d = c / heads;
    let mut concat = vec![vec![0.0; c]; q.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let mut hw = Vec::new();
        for (qi, qrow) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|krow| (h * d..(h + 1) * d).map(|x| qrow[x] * krow[x]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|x| x / z).collect();
            for x in h * d..(h + 1) * d {
                concat[qi][x] = (0..k.len()).map(|j| a[j] * v[j][x]).sum();
            }
            hw.push(a);
        }
        weights.push(hw);
    }
    (proj(&concat, wo), weights)
}

pub fn naive_layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i])
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
