//! Instance-level bipartite matching and point-level ordering selection.

use crate::error::{invalid, Result, SgqError};
use crate::geom::{equivalent_permutations, Point};
use crate::synth::Target;

/// Minimum-cost assignment over a dense `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs, one per row when `rows <= cols` (else one per
    /// column), sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Hungarian algorithm with row/column potentials, `O(r^2 c)`. Rectangular
/// inputs are matched on the smaller side.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if cost.len() != rows * cols {
        return Err(invalid(format!("cost matrix has {} entries, expected {rows}x{cols}", cost.len())));
    }
    if let Some(k) = cost.iter().position(|c| !c.is_finite()) {
        return Err(SgqError::NonFinite(format!("matching cost at ({}, {})", k / cols.max(1), k % cols.max(1))));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }
    let mut pairs = if rows <= cols {
        solve(rows, cols, |i, j| cost[i * cols + j])
    } else {
        let mut t: Vec<(usize, usize)> = solve(cols, rows, |i, j| cost[j * cols + i])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        t.sort_unstable();
        t
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
    Ok(Assignment { pairs, total })
}

/// Square-or-wide core: assigns every one of `n <= m` rows.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect()
}

/// Summed Manhattan distance between paired points.
pub fn manhattan(a: &[Point], b: &[Point]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs()).sum()
}

/// Ordering of the target (a member of its equivalent permutations) closest
/// to `pred` in summed Manhattan distance, with that distance.
pub fn point_assignment(pred: &[Point], gt: &Target) -> (Vec<usize>, f64) {
    let n = gt.points.len();
    let mut best = (Vec::new(), f64::INFINITY);
    for perm in equivalent_permutations(n, gt.closed) {
        let d: f64 = perm
            .iter()
            .zip(pred)
            .map(|(&k, p)| (p[0] - gt.points[k][0]).abs() + (p[1] - gt.points[k][1]).abs())
            .sum();
        if d < best.1 {
            best = (perm, d);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub cls: f64,
    pub pts: f64,
}

/// `cls * (-p[class]) + pts * (mean Manhattan distance under the best
/// ordering)`, in normalised coordinates.
pub fn instance_cost(probs: &[f64], pred: &[Point], gt: &Target, w: CostWeights) -> f64 {
    let (_, d) = point_assignment(pred, gt);
    w.cls * -probs[gt.class.index()] + w.pts * d / gt.points.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    /// Target point order, from its equivalent permutations.
    pub ordering: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Target index per prediction, `None` for background.
    pub assignment: Vec<Option<usize>>,
    pub pairs: Vec<MatchedPair>,
    pub total_cost: f64,
}

/// Matches predictions (class probabilities and points per instance) to
/// targets, then picks each matched pair's target ordering.
pub fn match_predictions(probs: &[Vec<f64>], points: &[Vec<Point>], targets: &[Target], w: CostWeights) -> Result<MatchResult> {
    let (m, g) = (probs.len(), targets.len());
    if points.len() != m {
        return Err(invalid(format!("{m} class rows but {} point sets", points.len())));
    }
    let mut cost = vec![0.0; m * g];
    let mut orders = vec![Vec::new(); m * g];
    for i in 0..m {
        for (j, t) in targets.iter().enumerate() {
            let (ord, d) = point_assignment(&points[i], t);
            cost[i * g + j] = w.cls * -probs[i][t.class.index()] + w.pts * d / t.points.len().max(1) as f64;
            orders[i * g + j] = ord;
        }
    }
    let a = hungarian(&cost, m, g)?;
    let mut assignment = vec![None; m];
    let pairs = a
        .pairs
        .iter()
        .map(|&(i, j)| {
            assignment[i] = Some(j);
            MatchedPair {
                pred: i,
                gt: j,
                ordering: std::mem::take(&mut orders[i * g + j]),
            }
        })
        .collect();
    Ok(MatchResult {
        assignment,
        pairs,
        total_cost: a.total,
    })
}
