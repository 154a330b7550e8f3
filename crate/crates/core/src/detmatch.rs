//! One-to-one box matching at an IoU threshold and detection P/R/F1.
//!
//! Matching is a maximum-weight assignment over admissible pairs (weight at
//! least the threshold), solved with the Hungarian method on a zero-padded
//! square matrix. Among optimal matchings the lexicographically smallest pair
//! sequence wins; ties are resolved on the equality subgraph of the optimal
//! dual so the result does not depend on solver internals.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};

/// Tolerance for treating a reduced cost as zero.
const TIGHT_EPS: f64 = 1e-9;

/// What the assignment maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchObjective {
    /// Maximize the summed IoU of matched pairs.
    #[default]
    TotalIou,
    /// Maximize the number of matched pairs, then summed IoU.
    PairCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `(pred, gt)` index pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub threshold: f64,
    /// Sum of the weights of matched pairs.
    pub total_weight: f64,
}

impl Matching {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Min-cost square assignment (potential-based Hungarian). Returns the
/// column for each row plus the row and column potentials, with
/// `cost[i][j] - u[i] - v[j] >= 0` and equality on assigned pairs.
fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internally; index 0 is the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

struct Equality<'a> {
    n: usize,
    cost: &'a [f64],
    u: &'a [f64],
    v: &'a [f64],
    /// Row-major flags for real, above-threshold pairs.
    admissible: &'a [bool],
}

impl Equality<'_> {
    fn tight(&self, i: usize, j: usize) -> bool {
        (self.cost[i * self.n + j] - self.u[i] - self.v[j]).abs() <= TIGHT_EPS
    }

    fn admissible(&self, i: usize, j: usize) -> bool {
        self.admissible[i * self.n + j]
    }

    /// A locked row may still trade one dummy column for another.
    fn movable(&self, r: usize, row_to_col: &[usize], locked: &[bool]) -> bool {
        !locked[r] || !self.admissible(r, row_to_col[r])
    }
}

/// Kuhn-style search for an alternating path that gives free row `row` a
/// column, ending at `target` (the only free column), avoiding locked rows.
fn reroute(
    eq: &Equality<'_>,
    row: usize,
    target: usize,
    row_to_col: &mut [usize],
    col_to_row: &mut [Option<usize>],
    locked: &[bool],
    seen: &mut [bool],
) -> bool {
    let dummy_only = locked[row];
    for c in 0..eq.n {
        if seen[c] || !eq.tight(row, c) || (dummy_only && eq.admissible(row, c)) {
            continue;
        }
        seen[c] = true;
        let ok = if c == target {
            true
        } else {
            match col_to_row[c] {
                Some(r) if eq.movable(r, row_to_col, locked) => {
                    reroute(eq, r, target, row_to_col, col_to_row, locked, seen)
                }
                _ => false,
            }
        };
        if ok {
            row_to_col[row] = c;
            col_to_row[c] = Some(row);
            return true;
        }
    }
    false
}

/// Maximum-weight one-to-one assignment over pairs with `weight >= threshold`.
///
/// `weights` is row-major with one row per prediction; rows may differ in
/// length from the column count only if the matrix is empty.
pub fn assign_with(weights: &[Vec<f64>], threshold: f64, objective: MatchObjective) -> Matching {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let empty = Matching {
        pairs: Vec::new(),
        threshold,
        total_weight: 0.0,
    };
    if rows == 0 || cols == 0 {
        return empty;
    }
    let n = rows.max(cols);
    let admissible = |i: usize, j: usize| i < rows && j < cols && weights[i][j] >= threshold;
    let bonus = match objective {
        MatchObjective::TotalIou => 0.0,
        MatchObjective::PairCount => (n + 1) as f64,
    };
    let mut cost = vec![0.0; n * n];
    let mut any = false;
    for i in 0..rows {
        for j in 0..cols {
            if admissible(i, j) {
                cost[i * n + j] = -(weights[i][j] + bonus);
                any = true;
            }
        }
    }
    if !any {
        return empty;
    }
    let (mut row_to_col, u, v) = hungarian(&cost, n);
    let adm: Vec<bool> = (0..n * n).map(|k| admissible(k / n, k % n)).collect();
    let eq = Equality {
        n,
        cost: &cost,
        u: &u,
        v: &v,
        admissible: &adm,
    };
    let mut col_to_row = vec![None; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = Some(r);
    }

    // Walk prediction rows in order, moving each to the smallest admissible
    // column that still completes an optimal assignment.
    let mut locked = vec![false; n];
    for i in 0..rows {
        locked[i] = true;
        for j in 0..cols {
            if !admissible(i, j) {
                continue;
            }
            if row_to_col[i] == j {
                break;
            }
            if !eq.tight(i, j) {
                continue;
            }
            let holder = col_to_row[j].expect("perfect matching");
            if !eq.movable(holder, &row_to_col, &locked) {
                continue;
            }
            let old_col = row_to_col[i];
            let (saved_r2c, saved_c2r) = (row_to_col.clone(), col_to_row.clone());
            row_to_col[i] = j;
            col_to_row[j] = Some(i);
            col_to_row[old_col] = None;
            let mut seen = vec![false; n];
            seen[j] = true;
            if reroute(
                &eq,
                holder,
                old_col,
                &mut row_to_col,
                &mut col_to_row,
                &locked,
                &mut seen,
            ) {
                break;
            }
            row_to_col = saved_r2c;
            col_to_row = saved_c2r;
        }
    }

    let pairs: Vec<(usize, usize)> = (0..rows)
        .filter_map(|i| {
            let j = row_to_col[i];
            admissible(i, j).then_some((i, j))
        })
        .collect();
    let total_weight = pairs.iter().map(|&(i, j)| weights[i][j]).sum();
    Matching {
        pairs,
        threshold,
        total_weight,
    }
}

pub fn assign(weights: &[Vec<f64>], threshold: f64) -> Matching {
    assign_with(weights, threshold, MatchObjective::TotalIou)
}

pub fn iou_matrix(preds: &[BBox], gts: &[BBox]) -> Vec<Vec<f64>> {
    preds.iter().map(|p| gts.iter().map(|g| iou(p, g)).collect()).collect()
}

pub fn match_boxes_with(preds: &[BBox], gts: &[BBox], threshold: f64, objective: MatchObjective) -> Matching {
    assign_with(&iou_matrix(preds, gts), threshold, objective)
}

pub fn match_boxes(preds: &[BBox], gts: &[BBox], threshold: f64) -> Matching {
    match_boxes_with(preds, gts, threshold, MatchObjective::TotalIou)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionScores {
    /// Scores for an unusable prediction.
    pub fn invalid(gt_count: usize) -> Self {
        Self {
            tp: 0,
            fp: 0,
            fn_: gt_count,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        }
    }

    /// Apply the guarded ratio formulas to match counts.
    pub fn from_counts(tp: usize, pred_count: usize, gt_count: usize) -> Self {
        let fp = pred_count - tp;
        let fn_ = gt_count - tp;
        if pred_count == 0 && gt_count == 0 {
            return Self {
                tp,
                fp,
                fn_,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let precision = tp as f64 / (tp + fp).max(1) as f64;
        let recall = if gt_count == 0 {
            1.0
        } else {
            tp as f64 / gt_count as f64
        };
        let f1 = 2.0 * precision * recall / (precision + recall).max(1.0);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

pub fn detection_scores(preds: &[BBox], gts: &[BBox], threshold: f64) -> DetectionScores {
    let m = match_boxes(preds, gts, threshold);
    DetectionScores::from_counts(m.len(), preds.len(), gts.len())
}
