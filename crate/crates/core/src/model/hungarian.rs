//! Minimum-cost bipartite assignment (shortest augmenting paths with
//! potentials).

/// Assign each of the `n` rows of an `n × m` cost matrix (`n ≤ m`, row-major)
/// to a distinct column, minimizing the total cost. Returns the column for
/// every row.
pub fn assign(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    assert!(n <= m, "more rows than columns");
    assert_eq!(cost.len(), n * m);
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let c = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row matched to column j (0 = none); way[j]: previous column on path
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
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn total(cost: &[f64], m: usize, a: &[usize]) -> f64 {
        a.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum()
    }

    /// Exhaustive search over injective row→column maps.
    fn brute(cost: &[f64], n: usize, m: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, m: usize, i: usize, used: &mut Vec<bool>) -> f64 {
            if i == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[i * m + j] + rec(cost, n, m, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, n, m, 0, &mut vec![false; m])
    }

    #[test]
    fn single_row_picks_minimum() {
        let cost: Vec<f64> = (0..20)
            .map(|j| if j == 13 { -1.0 } else { j as f64 })
            .collect();
        assert_eq!(assign(&cost, 1, 20), vec![13]);
    }

    #[test]
    fn square_known_case() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = assign(&cost, 3, 3);
        assert_eq!(total(&cost, 3, &a), 5.0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(n in 1usize..5, extra in 0usize..3, vals in proptest::collection::vec(-10.0f64..10.0, 40)) {
            let m = n + extra;
            let cost: Vec<f64> = (0..n * m).map(|k| vals[k % vals.len()] + (k / vals.len()) as f64).collect();
            let a = assign(&cost, n, m);
            let mut seen = a.clone();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
            prop_assert!((total(&cost, m, &a) - brute(&cost, n, m)).abs() < 1e-9);
        }
    }
}
