//! Rectangular linear assignment (Kuhn–Munkres with potentials, O(n²m)).

/// Assignment maximizing the total weight. `weights[r][c]`; every row of a
/// square-or-wide matrix is matched, tall matrices leave extra rows `None`.
pub fn assign_max(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows <= cols {
        solve(rows, cols, |r, c| -weights[r][c])
    } else {
        let by_col = solve(cols, rows, |c, r| -weights[r][c]);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        out
    }
}

/// Minimum-cost assignment for `n ≤ m`; returns the column of each row.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; 0 means free
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
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(w: &[Vec<f64>], a: &[Option<usize>]) -> f64 {
        a.iter().enumerate().filter_map(|(r, c)| c.map(|c| w[r][c])).sum()
    }

    #[test]
    fn picks_the_off_diagonal_when_better() {
        let w = vec![vec![1.0, 5.0], vec![4.0, 1.0]];
        assert_eq!(assign_max(&w), vec![Some(1), Some(0)]);
    }

    #[test]
    fn rectangular_shapes() {
        let wide = vec![vec![0.1, 0.9, 0.3]];
        assert_eq!(assign_max(&wide), vec![Some(1)]);
        let tall = vec![vec![0.2], vec![0.7], vec![0.1]];
        assert_eq!(assign_max(&tall), vec![None, Some(0), None]);
        assert!(assign_max(&[]).is_empty());
    }

    #[test]
    fn distinct_columns() {
        let w = vec![vec![1.0, 1.0, 1.0]; 3];
        let a = assign_max(&w);
        let mut cols: Vec<_> = a.iter().map(|c| c.unwrap()).collect();
        cols.sort();
        assert_eq!(cols, vec![0, 1, 2]);
        assert_eq!(total(&w, &a), 3.0);
    }
}
