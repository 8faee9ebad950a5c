//! Minimum-norm point in the convex hull of task gradients.
//!
//! Given gradients `g_1..g_T`, find simplex weights `w` minimizing
//! `‖Σ w_i g_i‖²`. Everything works on the Gram matrix `M = G Gᵀ`, so the
//! gradient width P only enters once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinNormSolution {
    pub weights: Vec<f64>,
    /// `‖Σ w_i g_i‖²`
    pub norm_sq: f64,
    pub iterations: usize,
    /// Frank-Wolfe duality gap at termination (0 for the closed form).
    pub gap: f64,
}

pub fn gram(grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = grads.len();
    let mut m = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in i..t {
            let d: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

fn quad(m: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            s += w[i] * w[j] * v;
        }
    }
    s
}

/// Step `γ ∈ [0,1]` minimizing `‖(1−γ)x + γy‖²` from the three dot products.
pub fn two_point_step(xx: f64, xy: f64, yy: f64) -> f64 {
    let denom = xx - 2.0 * xy + yy;
    if denom <= 0.0 {
        return 0.0;
    }
    ((xx - xy) / denom).clamp(0.0, 1.0)
}

/// Closed form for two tasks: weight `α` on `g1`, `1−α` on `g2`, with
/// `α = clip((g2−g1)·g2 / ‖g1−g2‖², 0, 1)`. Coincident gradients tie-break
/// to (0.5, 0.5).
pub fn two_task_closed_form(m11: f64, m12: f64, m22: f64) -> (f64, f64) {
    let diff_sq = m11 - 2.0 * m12 + m22;
    if diff_sq <= 0.0 {
        return (0.5, 0.5);
    }
    let alpha = ((m22 - m12) / diff_sq).clamp(0.0, 1.0);
    (alpha, 1.0 - alpha)
}

/// Frank-Wolfe on the simplex from `init`, with exact line search between the
/// current point and the best vertex. Stops when the duality gap drops below
/// `tol` or after `max_iter` iterations.
pub fn frank_wolfe(m: &[Vec<f64>], init: &[f64], tol: f64, max_iter: usize) -> MinNormSolution {
    let t = m.len();
    let mut w = init.to_vec();
    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    while iterations < max_iter {
        let mw: Vec<f64> = (0..t)
            .map(|i| (0..t).map(|j| m[i][j] * w[j]).sum())
            .collect();
        let xx: f64 = w.iter().zip(&mw).map(|(a, b)| a * b).sum();
        let (best, &xy) = mw
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least one task");
        gap = xx - xy;
        if gap < tol {
            break;
        }
        let gamma = two_point_step(xx, xy, m[best][best]);
        for (i, wi) in w.iter_mut().enumerate() {
            *wi *= 1.0 - gamma;
            if i == best {
                *wi += gamma;
            }
        }
        iterations += 1;
    }
    if gap.is_infinite() {
        gap = 0.0;
    }
    MinNormSolution {
        norm_sq: quad(m, &w).max(0.0),
        weights: w,
        iterations,
        gap,
    }
}

/// Minimum-norm simplex weights for the given per-task gradients.
///
/// T=1 returns `[1]`; T=2 uses the closed form; larger T runs Frank-Wolfe
/// warm-started from the best pairwise solution.
pub fn min_norm_point(grads: &[Vec<f64>], tol: f64, max_iter: usize) -> Result<MinNormSolution> {
    let t = grads.len();
    if t == 0 {
        return Err(Error::Invalid("min-norm point of zero gradients".into()));
    }
    let p = grads[0].len();
    if grads.iter().any(|g| g.len() != p) {
        return Err(Error::Shape("gradient rows differ in length".into()));
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite gradient entry".into()));
    }
    let m = gram(grads);
    if t == 1 {
        return Ok(MinNormSolution {
            weights: vec![1.0],
            norm_sq: m[0][0],
            iterations: 0,
            gap: 0.0,
        });
    }
    if t == 2 {
        let (a, b) = two_task_closed_form(m[0][0], m[0][1], m[1][1]);
        let w = vec![a, b];
        return Ok(MinNormSolution {
            norm_sq: quad(&m, &w).max(0.0),
            weights: w,
            iterations: 0,
            gap: 0.0,
        });
    }
    let mut init = vec![0.0; t];
    let mut best = f64::INFINITY;
    for i in 0..t {
        for j in (i + 1)..t {
            let (a, b) = two_task_closed_form(m[i][i], m[i][j], m[j][j]);
            let v = a * a * m[i][i] + 2.0 * a * b * m[i][j] + b * b * m[j][j];
            if v < best {
                best = v;
                init.iter_mut().for_each(|x| *x = 0.0);
                init[i] = a;
                init[j] = b;
            }
        }
    }
    Ok(frank_wolfe(&m, &init, tol, max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn point(grads: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
        let p = grads[0].len();
        (0..p)
            .map(|k| grads.iter().zip(w).map(|(g, wi)| wi * g[k]).sum())
            .collect()
    }

    #[test]
    fn identical_gradients_tie_break() {
        let s = min_norm_point(
            &[vec![1.0, 2.0], vec![1.0, 2.0]],
            DEFAULT_TOL,
            DEFAULT_MAX_ITER,
        )
        .unwrap();
        assert_eq!(s.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let g = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = min_norm_point(&g, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.weights, vec![0.5, 0.5]);
        assert_eq!(point(&g, &s.weights), vec![0.5, 0.5]);
    }

    /// Grid-search oracle over α ∈ {0, 0.001, …, 1}.
    #[test]
    fn asymmetric_pair_against_grid() {
        let g = [vec![2.0, 0.0], vec![0.0, 1.0]];
        let s = min_norm_point(&g, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let (mut best_a, mut best_v) = (0.0, f64::INFINITY);
        for k in 0..=1000 {
            let a = k as f64 / 1000.0;
            let v = (2.0 * a).powi(2) + (1.0 - a).powi(2);
            if v < best_v {
                best_v = v;
                best_a = a;
            }
        }
        assert!((best_a - 0.2f64).abs() < 1e-12);
        assert!((s.weights[0] - best_a).abs() < 1e-12);
        let pt = point(&g, &s.weights);
        assert!((pt[0] - 0.4).abs() < 1e-12 && (pt[1] - 0.8).abs() < 1e-12);
        assert!((s.norm_sq - 0.8).abs() < 1e-12);
        assert!((best_v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_task() {
        let s = min_norm_point(&[vec![3.0, 4.0]], DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        assert_eq!(s.norm_sq, 25.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(min_norm_point(&[], DEFAULT_TOL, DEFAULT_MAX_ITER).is_err());
        assert!(
            min_norm_point(&[vec![1.0], vec![1.0, 2.0]], DEFAULT_TOL, DEFAULT_MAX_ITER).is_err()
        );
        assert!(
            min_norm_point(&[vec![f64::NAN], vec![1.0]], DEFAULT_TOL, DEFAULT_MAX_ITER).is_err()
        );
    }

    #[test]
    fn common_descent_direction() {
        // Conflicting gradients: the min-norm direction has non-negative
        // inner product with every task gradient.
        let g = vec![
            vec![1.0, 0.2, -0.3],
            vec![-0.5, 1.0, 0.1],
            vec![0.2, -0.4, 1.0],
        ];
        let s = min_norm_point(&g, 1e-10, 10_000).unwrap();
        let d = point(&g, &s.weights);
        for gi in &g {
            let dot: f64 = gi.iter().zip(&d).map(|(a, b)| a * b).sum();
            assert!(dot >= s.norm_sq - 1e-6, "dot {dot} vs {}", s.norm_sq);
        }
    }

    proptest! {
        #[test]
        fn simplex_law(t in 1usize..6, p in 1usize..10, seed in proptest::collection::vec(-5.0f64..5.0, 60)) {
            let grads: Vec<Vec<f64>> = (0..t).map(|i| (0..p).map(|k| seed[(i * p + k) % seed.len()] + i as f64 * 0.1).collect()).collect();
            let s = min_norm_point(&grads, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            prop_assert!(s.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn fw_agrees_with_closed_form(a in proptest::collection::vec(-3.0f64..3.0, 5), b in proptest::collection::vec(-3.0f64..3.0, 5)) {
            let m = gram(&[a.clone(), b.clone()]);
            let (alpha, _) = two_task_closed_form(m[0][0], m[0][1], m[1][1]);
            let fw = frank_wolfe(&m, &[0.5, 0.5], 1e-12, 1000);
            let cf_val = quad(&m, &[alpha, 1.0 - alpha]);
            prop_assert!((fw.norm_sq - cf_val).abs() <= 1e-6);
        }
    }
}
