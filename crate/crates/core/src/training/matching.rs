use serde::{Deserialize, Serialize};

use super::LossWeights;
use crate::error::{Error, Result};
use crate::geometry::{cxcywh_to_xyxy, giou_xyxy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, ground truth)`, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// `λ_cls (1 − p_i[y_j]) + λ_1 ‖b̂_i − b_j‖₁ + λ_giou (1 − GIoU)`, `[Q][G]`.
pub fn match_cost(
    scores: &[Vec<f64>],
    boxes: &[[f64; 4]],
    labels: &[usize],
    gt_boxes: &[[f64; 4]],
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    if scores.len() != boxes.len() || labels.len() != gt_boxes.len() {
        return Err(Error::Dimension(format!(
            "{} score rows for {} boxes, {} labels for {} ground truths",
            scores.len(),
            boxes.len(),
            labels.len(),
            gt_boxes.len()
        )));
    }
    let mut out = Vec::with_capacity(scores.len());
    for (s, b) in scores.iter().zip(boxes) {
        let bx = cxcywh_to_xyxy(*b);
        let mut row = Vec::with_capacity(labels.len());
        for (&y, g) in labels.iter().zip(gt_boxes) {
            let p = *s
                .get(y)
                .ok_or_else(|| Error::Validation(format!("label {y} out of range for {} classes", s.len())))?;
            let l1: f64 = b.iter().zip(g).map(|(a, c)| (a - c).abs()).sum();
            let gi = giou_xyxy(&bx, &cxcywh_to_xyxy(*g));
            row.push(w.cls * (1.0 - p) + w.l1 * l1 + w.giou * (1.0 - gi));
        }
        out.push(row);
    }
    Ok(out)
}

/// Shortest-augmenting-path assignment of every row to a distinct column,
/// `rows <= cols`. Scans are in index order with strict comparisons, so the
/// result is a fixed function of the matrix.
fn assign(cost: &[Vec<f64>], n: usize, m: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-cost one-to-one matching of queries (rows) to ground truths
/// (columns). With more ground truths than queries, every query is matched.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let q = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != g) {
        return Err(Error::Dimension("cost matrix rows differ in length".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Validation("cost matrix has non-finite entries".into()));
    }
    if q == 0 || g == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched: (0..q).collect(),
        });
    }
    let mut pairs: Vec<(usize, usize)> = if g <= q {
        let t: Vec<Vec<f64>> = (0..g).map(|j| (0..q).map(|i| cost[i][j]).collect()).collect();
        assign(&t, g, q).into_iter().enumerate().map(|(j, i)| (i, j)).collect()
    } else {
        assign(cost, q, g).into_iter().enumerate().collect()
    };
    pairs.sort_unstable();
    let mut matched = vec![false; q];
    for &(i, _) in &pairs {
        matched[i] = true;
    }
    Ok(MatchResult {
        pairs,
        unmatched: (0..q).filter(|&i| !matched[i]).collect(),
    })
}

pub fn total_cost(cost: &[Vec<f64>], m: &MatchResult) -> f64 {
    m.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}
