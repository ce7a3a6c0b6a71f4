use crate::error::{Error, Result};

/// A minimum-cost bijection between rows and columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    /// `mapping[row] = column`.
    pub mapping: Vec<usize>,
    /// Sum of the chosen entries, accumulated in row order.
    pub total_cost: f64,
}

/// Minimum-cost assignment on a square matrix of finite costs.
///
/// Among several optimal assignments the lexicographically smallest mapping
/// is returned: row 0 takes the lowest column any optimum allows, then row 1,
/// and so on.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let n = cost.len();
    for (r, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::shape("hungarian_assign", format!("row {r} length"), n, row.len()));
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("hungarian_assign", format!("entry ({r}, {c}) is not finite")));
        }
    }
    if n == 0 {
        return Ok(AssignmentResult {
            mapping: vec![],
            total_cost: 0.0,
        });
    }
    let scale = cost.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let slack_tol = 1e-9 * scale * n as f64;

    let (first, u, v) = solve(cost, &(0..n).collect::<Vec<_>>(), &(0..n).collect::<Vec<_>>());
    let mut best = first;
    let mut best_total = row_order_total(cost, &best);

    // Fix rows one at a time to the smallest column that still admits an optimum.
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        for c in 0..best[r] {
            if fixed.contains(&c) || cost[r][c] - u[r] - v[c] > slack_tol {
                continue;
            }
            let rows: Vec<usize> = (r + 1..n).collect();
            let cols: Vec<usize> = (0..n).filter(|j| *j != c && !fixed.contains(j)).collect();
            let (sub, _, _) = solve(cost, &rows, &cols);
            let mut candidate = fixed.clone();
            candidate.push(c);
            candidate.extend(sub);
            let total = row_order_total(cost, &candidate);
            if total <= best_total {
                best = candidate;
                best_total = total;
                break;
            }
        }
        fixed.push(best[r]);
    }
    Ok(AssignmentResult {
        mapping: best,
        total_cost: best_total,
    })
}

fn row_order_total(cost: &[Vec<f64>], mapping: &[usize]) -> f64 {
    mapping.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

/// Shortest-augmenting-path assignment restricted to `rows x cols`
/// (equal counts). Returns the column of each listed row plus the row and
/// column potentials of the full index space (zero outside the sub-problem).
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let full = cost.len();
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
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
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = cols[j - 1];
    }
    let mut row_pot = vec![0.0; full];
    let mut col_pot = vec![0.0; full];
    for i in 1..=n {
        row_pot[rows[i - 1]] = u[i];
        col_pot[cols[i - 1]] = v[i];
    }
    (assign, row_pot, col_pot)
}
