//! Minimum-cost bipartite assignment (Hungarian algorithm with potentials).

use crate::error::{Error, Result};

/// Optimal one-to-one assignment of `min(n, m)` pairs for an `n x m` cost
/// matrix, as `(row, col)` pairs. Non-finite costs are rejected.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let width = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != width) {
        return Err(Error::Contract("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Contract("cost matrix has a non-finite entry".into()));
    }
    Ok(hungarian(cost))
}

/// Assigns every column of an `n x m` cost matrix (`n >= m`) to a distinct
/// row, minimising the total cost. Returns `(row, col)` pairs sorted by
/// column. With `n < m` the problem is solved on the transpose, so every row
/// gets a column instead.
fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");
    if m == 0 {
        return Vec::new();
    }
    if n < m {
        let transposed: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = hungarian(&transposed).into_iter().map(|(j, i)| (i, j)).collect();
        pairs.sort_by_key(|&(_, j)| j);
        return pairs;
    }
    // Classic O(m^2 n) shortest augmenting path on the m x n problem where
    // the columns of `cost` play the role of the rows being assigned.
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let (rows, cols) = (m, n);
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut way = vec![0usize; cols + 1];
    // p[j] = row assigned to column j (1-based, 0 = free)
    let mut p = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut pairs: Vec<(usize, usize)> = (1..=cols).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    pairs.sort_by_key(|&(_, c)| c);
    pairs
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r][c]).sum()
}
