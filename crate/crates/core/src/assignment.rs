//! Bipartite assignment of ground-truth tracks to prediction slots.
//!
//! [`hungarian`] pads the matrix to square with `max + 1`, solves it with the
//! shortest-augmenting-path form of Kuhn–Munkres, then walks the tight
//! (zero reduced cost) subgraph to pick the lexicographically smallest
//! optimal pair list. [`brute_force_assign`] enumerates injections and applies
//! the same tie rule, so the two agree pair-for-pair.

use serde::{Deserialize, Serialize};

use crate::cost::{frame_matching_cost, global_matching_cost, CostConfig};
use crate::error::{Error, Result};
use crate::model::{GroundTruthTrack, PredictionTrack};

pub const ORACLE_MAX_ROWS: usize = 8;
pub const ORACLE_MAX_COLS: usize = 10;

/// Dense `rows x cols` matrix of finite costs with `rows <= cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", values.len())));
        }
        if rows > cols {
            return Err(Error::TooManyRows { rows, cols });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: k / cols,
                col: k % cols,
            });
        }
        Ok(CostMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix rows".into()));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Costs within this distance of each other are treated as tied.
    pub fn tie_tolerance(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        1e-9 * (1.0 + scale)
    }

    /// Sum of the entries selected by `pairs`, accumulated in pair order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Injective map from gt indices to prediction slots, sorted by gt index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    pub fn pred_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }
}

pub fn hungarian(m: &CostMatrix) -> Result<Assignment> {
    let (rows, cols) = (m.rows, m.cols);
    if rows > cols {
        return Err(Error::TooManyRows { rows, cols });
    }
    if rows == 0 {
        return Ok(Assignment::empty());
    }
    let n = cols;
    let pad = m.values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + 1.0;
    let cost = |r: usize, c: usize| if r < rows { m.get(r, c) } else { pad };

    // 1-based potentials; p[j] is the row owning column j, way[j] the
    // predecessor column on the current augmenting path.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_col = vec![0usize; n];
    let mut col_row = vec![0usize; n];
    for j in 1..=n {
        row_col[p[j] - 1] = j - 1;
        col_row[j - 1] = p[j] - 1;
    }

    // Tight subgraph: every optimal assignment uses only these edges.
    let tol = m.tie_tolerance();
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|r| (0..n).map(|c| cost(r, c) - u[r + 1] - v[c + 1] <= tol).collect())
        .collect();

    let mut fixed = vec![false; n];
    for r in 0..rows {
        let current = row_col[r];
        for c in 0..current {
            if !tight[r][c] || fixed[col_row[c]] {
                continue;
            }
            if reroute(r, c, &tight, &fixed, &mut row_col, &mut col_row) {
                break;
            }
        }
        fixed[r] = true;
    }

    let pairs: Vec<(usize, usize)> = (0..rows).map(|r| (r, row_col[r])).collect();
    let total_cost = m.total(&pairs);
    Ok(Assignment { pairs, total_cost })
}

/// Moves row `r` onto column `c` if the displaced row can reach `r`'s old
/// column through an alternating path of tight edges over unfixed rows.
fn reroute(
    r: usize,
    c: usize,
    tight: &[Vec<bool>],
    fixed: &[bool],
    row_col: &mut [usize],
    col_row: &mut [usize],
) -> bool {
    let n = row_col.len();
    let freed = row_col[r];
    let displaced = col_row[c];
    // Temporarily give column c to r and freed to nobody.
    row_col[r] = c;
    col_row[c] = r;
    col_row[freed] = usize::MAX;

    let mut visited = vec![false; n];
    visited[c] = true;
    if augment(displaced, tight, fixed, r, &mut visited, row_col, col_row) {
        return true;
    }
    row_col[r] = freed;
    col_row[freed] = r;
    col_row[c] = displaced;
    row_col[displaced] = c;
    false
}

fn augment(
    row: usize,
    tight: &[Vec<bool>],
    fixed: &[bool],
    moving: usize,
    visited: &mut [bool],
    row_col: &mut [usize],
    col_row: &mut [usize],
) -> bool {
    for c in 0..row_col.len() {
        if visited[c] || !tight[row][c] {
            continue;
        }
        let owner = col_row[c];
        if owner != usize::MAX && (owner == moving || fixed[owner]) {
            continue;
        }
        visited[c] = true;
        if owner == usize::MAX || augment(owner, tight, fixed, moving, visited, row_col, col_row) {
            row_col[row] = c;
            col_row[c] = row;
            return true;
        }
    }
    false
}

/// Exhaustive minimum over all injections; the lexicographically first
/// injection within the tie tolerance of the minimum is returned.
pub fn brute_force_assign(m: &CostMatrix) -> Result<Assignment> {
    let (rows, cols) = (m.rows, m.cols);
    if rows > ORACLE_MAX_ROWS || cols > ORACLE_MAX_COLS {
        return Err(Error::OracleTooLarge {
            rows,
            cols,
            max_rows: ORACLE_MAX_ROWS,
            max_cols: ORACLE_MAX_COLS,
        });
    }
    if rows == 0 {
        return Ok(Assignment::empty());
    }

    struct Search<'a> {
        m: &'a CostMatrix,
        used: Vec<bool>,
        cols: Vec<usize>,
    }

    impl Search<'_> {
        // Visits every injection in lexicographic order; `visit` returns
        // false to stop the walk.
        fn walk(&mut self, row: usize, visit: &mut dyn FnMut(&[usize], f64) -> bool) -> bool {
            if row == self.m.rows {
                let total = self.cols.iter().enumerate().map(|(r, &c)| self.m.get(r, c)).sum();
                return visit(&self.cols, total);
            }
            for c in 0..self.m.cols {
                if self.used[c] {
                    continue;
                }
                self.used[c] = true;
                self.cols.push(c);
                let go_on = self.walk(row + 1, visit);
                self.cols.pop();
                self.used[c] = false;
                if !go_on {
                    return false;
                }
            }
            true
        }
    }

    let mut search = Search {
        m,
        used: vec![false; cols],
        cols: Vec::with_capacity(rows),
    };
    let mut best = f64::INFINITY;
    search.walk(0, &mut |_, total| {
        best = best.min(total);
        true
    });
    let limit = best + m.tie_tolerance();
    let mut chosen = Vec::new();
    search.walk(0, &mut |cols, total| {
        if total <= limit {
            chosen = cols.to_vec();
            false
        } else {
            true
        }
    });
    let pairs: Vec<(usize, usize)> = chosen.into_iter().enumerate().collect();
    let total_cost = m.total(&pairs);
    Ok(Assignment { pairs, total_cost })
}

fn check_counts(gt: &[GroundTruthTrack], pred: &[PredictionTrack]) -> Result<()> {
    if gt.len() > pred.len() {
        return Err(Error::TooManyRows {
            rows: gt.len(),
            cols: pred.len(),
        });
    }
    Ok(())
}

pub fn build_global_cost_matrix(
    gt: &[GroundTruthTrack],
    pred: &[PredictionTrack],
    cfg: &CostConfig,
) -> Result<CostMatrix> {
    check_counts(gt, pred)?;
    let mut values = Vec::with_capacity(gt.len() * pred.len());
    for g in gt {
        for p in pred {
            values.push(global_matching_cost(g, p, cfg)?);
        }
    }
    CostMatrix::new(gt.len(), pred.len(), values)
}

/// Global instance assignment: Hungarian matching on whole-clip costs.
pub fn global_instance_assignment(
    gt: &[GroundTruthTrack],
    pred: &[PredictionTrack],
    cfg: &CostConfig,
) -> Result<Assignment> {
    hungarian(&build_global_cost_matrix(gt, pred, cfg)?)
}

/// Local matching and propagation: each gt is matched on the first frame it
/// is visible, jointly with every other gt first visible on that frame,
/// against the slots still free. The reported cost is the global one.
pub fn locpro_assignment(
    gt: &[GroundTruthTrack],
    pred: &[PredictionTrack],
    cfg: &CostConfig,
) -> Result<Assignment> {
    check_counts(gt, pred)?;
    let mut by_frame: Vec<(usize, usize)> = gt
        .iter()
        .enumerate()
        .map(|(k, g)| (g.first_visible_frame().unwrap_or(0), k))
        .collect();
    by_frame.sort_unstable();

    let mut taken = vec![false; pred.len()];
    let mut pairs = Vec::with_capacity(gt.len());
    let mut start = 0;
    while start < by_frame.len() {
        let frame = by_frame[start].0;
        let end = start + by_frame[start..].iter().take_while(|e| e.0 == frame).count();
        let group: Vec<usize> = by_frame[start..end].iter().map(|e| e.1).collect();
        let free: Vec<usize> = (0..pred.len()).filter(|&j| !taken[j]).collect();
        let mut values = Vec::with_capacity(group.len() * free.len());
        for &k in &group {
            for &j in &free {
                values.push(frame_matching_cost(&gt[k], &pred[j], frame + 1, cfg)?);
            }
        }
        let local = hungarian(&CostMatrix::new(group.len(), free.len(), values)?)?;
        for (r, c) in local.pairs {
            taken[free[c]] = true;
            pairs.push((group[r], free[c]));
        }
        start = end;
    }
    pairs.sort_unstable();
    let total_cost = assignment_pairs_cost(&pairs, gt, pred, cfg)?;
    Ok(Assignment { pairs, total_cost })
}

fn assignment_pairs_cost(
    pairs: &[(usize, usize)],
    gt: &[GroundTruthTrack],
    pred: &[PredictionTrack],
    cfg: &CostConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for &(g, p) in pairs {
        if g >= gt.len() || p >= pred.len() {
            return Err(Error::InvalidAssignment { gt: g, pred: p });
        }
        total += global_matching_cost(&gt[g], &pred[p], cfg)?;
    }
    Ok(total)
}

pub fn assignment_total_global_cost(
    assignment: &Assignment,
    gt: &[GroundTruthTrack],
    pred: &[PredictionTrack],
    cfg: &CostConfig,
) -> Result<f64> {
    assignment_pairs_cost(&assignment.pairs, gt, pred, cfg)
}
