//! Minimum-cost rectangular assignment (Kuhn–Munkres with potentials).

/// Solves `min Σ cost[r][assign[r]]` over one-to-one assignments. `cost` is
/// row-major `rows × cols`; every row gets a column when `rows ≤ cols`,
/// otherwise `rows − cols` rows stay unassigned.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(cost.len(), rows * cols, "cost matrix size");
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<f64> = (0..cols * rows).map(|i| cost[(i % rows) * cols + i / rows]).collect();
        let by_col = min_cost_assignment(&transposed, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    let (n, m) = (rows, cols);
    let a = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
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
    let mut out = vec![None; rows];
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

    #[test]
    fn two_by_two_hand_case() {
        // identity costs 1 + 1, swap costs 0.2 + 0.3
        let cost = [1.0, 0.2, 0.3, 1.0];
        assert_eq!(min_cost_assignment(&cost, 2, 2), vec![Some(1), Some(0)]);
    }

    #[test]
    fn rectangular_shapes() {
        let cost = [5.0, 1.0, 9.0];
        assert_eq!(min_cost_assignment(&cost, 1, 3), vec![Some(1)]);
        assert_eq!(min_cost_assignment(&cost, 3, 1), vec![None, Some(0), None]);
        assert!(min_cost_assignment(&[], 0, 4).is_empty());
        assert_eq!(min_cost_assignment(&[], 2, 0), vec![None, None]);
    }
}
