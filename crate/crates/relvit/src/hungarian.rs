//! Optimal bipartite assignment (Hungarian algorithm).
//!
//! Solves min-cost assignment of `min(n, m)` pairs on an `n x m` cost grid
//! with the O(n^2 m) shortest-augmenting-path formulation, using dual
//! potentials in f64. Because the core solver breaks ties arbitrarily, a
//! refinement pass then pins down the lexicographically smallest optimal
//! assignment (pairs sorted by row, compared as a sequence), which makes
//! downstream training and tests fully deterministic.

use crate::error::{Error, Result};

/// Dense f64 cost grid.
#[derive(Debug, Clone)]
pub struct CostGrid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "cost grid {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "cost grid entry {i} is non-finite ({v})"
                )));
            }
        }
        Ok(CostGrid { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// One-to-one assignment: `pairs` is sorted by row index.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Core solver for the case rows <= cols: assigns every row, returning the
/// column per row and the optimal total cost. Tie-breaking is arbitrary.
fn assign_all_rows(cost: &CostGrid) -> (Vec<usize>, f64) {
    let n = cost.rows;
    let m = cost.cols;
    debug_assert!(n <= m);
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays; p[j] = row occupying column j (0 = free).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
        // Walk the augmenting path backwards.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols_of = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols_of[p[j] - 1] = j - 1;
        }
    }
    let total: f64 = cols_of.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum();
    (cols_of, total)
}

/// Optimal cost of assigning all of `rows` into distinct members of `cols`
/// (requires `rows.len() <= cols.len()`).
fn sub_cost(cost: &CostGrid, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let data: Vec<f64> =
        rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).map(|(r, c)| cost.get(r, c)).collect();
    let sub = CostGrid { rows: rows.len(), cols: cols.len(), data };
    assign_all_rows(&sub).1
}

/// Min-cost assignment of `min(n, m)` pairs, lexicographically smallest among
/// optima. An empty grid yields an empty assignment.
pub fn hungarian(cost: &CostGrid) -> Result<Assignment> {
    let n = cost.rows;
    let m = cost.cols;
    if n == 0 || m == 0 {
        return Ok(Assignment { pairs: Vec::new(), total_cost: 0.0 });
    }

    // Optimal total cost, orienting so rows <= cols for the core solver.
    let optimum = if n <= m {
        assign_all_rows(cost).1
    } else {
        let t: Vec<f64> =
            (0..m).flat_map(|c| (0..n).map(move |r| (r, c))).map(|(r, c)| cost.get(r, c)).collect();
        let transposed = CostGrid { rows: m, cols: n, data: t };
        assign_all_rows(&transposed).1
    };

    // Lexicographic refinement: walk rows in order, committing the smallest
    // column (or, when n > m, a row skip) that still completes to the
    // optimum. Equality is checked with a tolerance scaled to the optimum.
    let eps = 1e-9 * (1.0 + optimum.abs());
    let slots = n.min(m);
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(slots);
    let mut free_cols: Vec<usize> = (0..m).collect();
    let mut fixed_cost = 0.0f64;
    for r in 0..n {
        if pairs.len() == slots {
            break;
        }
        let rows_after: Vec<usize> = (r + 1..n).collect();
        let slots_left = slots - pairs.len();
        let mut committed = false;
        for ci in 0..free_cols.len() {
            let c = free_cols[ci];
            let cols_after: Vec<usize> =
                free_cols.iter().enumerate().filter(|&(i, _)| i != ci).map(|(_, &v)| v).collect();
            let completion = completion_cost(cost, &rows_after, &cols_after, slots_left - 1);
            if fixed_cost + cost.get(r, c) + completion <= optimum + eps {
                fixed_cost += cost.get(r, c);
                pairs.push((r, c));
                free_cols.remove(ci);
                committed = true;
                break;
            }
        }
        if !committed {
            // Row r is dropped (only possible when n > m); the rest must
            // still reach the optimum or the refinement logic is broken.
            let completion = completion_cost(cost, &rows_after, &free_cols, slots_left);
            if fixed_cost + completion > optimum + eps {
                return Err(Error::Contract(
                    "assignment refinement failed to reproduce the optimal cost".into(),
                ));
            }
        }
    }

    // Recompute the total in fixed row order for bit-stable reporting.
    let total: f64 = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok(Assignment { pairs, total_cost: total })
}

/// Min cost of completing an assignment: either all `rows` are assigned into
/// `cols` (when rows run out first) or all `cols` into `rows` (when columns
/// do). Returns infinity if `need` cannot be met.
fn completion_cost(cost: &CostGrid, rows: &[usize], cols: &[usize], need: usize) -> f64 {
    if need == 0 {
        return 0.0;
    }
    if need > rows.len() || need > cols.len() {
        return f64::INFINITY;
    }
    if need == rows.len() && rows.len() <= cols.len() {
        return sub_cost(cost, rows, cols);
    }
    if need == cols.len() && cols.len() <= rows.len() {
        let data: Vec<f64> = cols
            .iter()
            .flat_map(|&c| rows.iter().map(move |&r| (r, c)))
            .map(|(r, c)| cost.get(r, c))
            .collect();
        let sub = CostGrid { rows: cols.len(), cols: rows.len(), data };
        return assign_all_rows(&sub).1;
    }
    // Callers always exhaust one side or the other.
    unreachable!("completion_cost called with unsupported need");
}
