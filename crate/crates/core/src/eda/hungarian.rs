use crate::error::{Error, Result};

/// Minimum-cost perfect assignment on a square matrix.
///
/// Returns `perm` with row `i` assigned to column `perm[i]`. Among optimal
/// assignments the lexicographically smallest `perm` is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if let Some(r) = cost.iter().position(|r| r.len() != n) {
        return Err(Error::contract(format!(
            "assignment needs a square matrix; row {r} has {} columns, expected {n}",
            cost[r].len()
        )));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::contract("assignment costs must be finite"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let best = assignment_cost(cost, &solve(cost));
    let scale = cost.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale * n as f64;

    // Fix rows one at a time to the smallest column that still admits an optimum.
    let mut perm = vec![usize::MAX; n];
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut fixed = 0.0;
    for row in 0..n {
        let rest_rows: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for (k, &col) in free_cols.iter().enumerate() {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != col).collect();
            let sub: Vec<Vec<f64>> = rest_rows
                .iter()
                .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
                .collect();
            let sub_cost = if sub.is_empty() { 0.0 } else { assignment_cost(&sub, &solve(&sub)) };
            if fixed + cost[row][col] + sub_cost <= best + tol {
                chosen = Some(k);
                break;
            }
        }
        let k = chosen.unwrap_or(0);
        let col = free_cols.remove(k);
        perm[row] = col;
        fixed += cost[row][col];
    }
    Ok(perm)
}

/// Total of `cost[i][perm[i]]`, summed in row order.
pub fn assignment_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Shortest augmenting path solver with row/column potentials, O(n³).
fn solve(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-based arrays; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
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
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}
