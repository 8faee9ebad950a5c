//! GradNorm weight updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{PerTask, TaskKind};

pub const DEFAULT_ALPHA: f64 = 1.5;
const MIN_WEIGHT: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradNormState {
    pub alpha: f64,
    pub lambda: [f64; 4],
    /// Reference losses, recorded the first time each task is seen.
    pub l0: [Option<f64>; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormUpdate {
    /// `Σ |G_i − G̅·r_i^α|` before the update.
    pub objective: f64,
    pub targets: [Option<f64>; 4],
}

impl GradNormState {
    pub fn new(alpha: f64, lambda: [f64; 4]) -> Self {
        GradNormState {
            alpha,
            lambda,
            l0: [None; 4],
        }
    }

    /// Record any reference losses not yet seen.
    pub fn observe(&mut self, losses: &PerTask<Option<f64>>) {
        for t in TaskKind::ALL {
            if self.l0[t.index()].is_none() {
                self.l0[t.index()] = losses[t];
            }
        }
    }
}

/// One GradNorm update over the active tasks.
///
/// `grad_norms[i]` is `‖∇_W(λ_i L_i)‖₂` on the chosen weight scope. The
/// objective `Σ|G_i − target_i|` has `∂/∂λ_i = sign(G_i − target_i)·G_i/λ_i`;
/// after the step all weights are rescaled to sum to 4.
pub fn gradnorm_step(
    state: &mut GradNormState,
    losses: &PerTask<Option<f64>>,
    grad_norms: &PerTask<Option<f64>>,
    lr: f64,
) -> Result<GradNormUpdate> {
    let active: Vec<TaskKind> = TaskKind::ALL
        .into_iter()
        .filter(|t| losses[*t].is_some() && grad_norms[*t].is_some())
        .collect();
    let mut targets = [None; 4];
    if active.is_empty() {
        return Ok(GradNormUpdate {
            objective: 0.0,
            targets,
        });
    }
    let mut ratio = Vec::with_capacity(active.len());
    for &t in &active {
        let l0 = state.l0[t.index()].ok_or(Error::ZeroReferenceLoss(t))?;
        if l0 == 0.0 {
            return Err(Error::ZeroReferenceLoss(t));
        }
        ratio.push(losses[t].unwrap() / l0);
    }
    let mean_ratio = ratio.iter().sum::<f64>() / ratio.len() as f64;
    let g: Vec<f64> = active.iter().map(|t| grad_norms[*t].unwrap()).collect();
    let g_bar = g.iter().sum::<f64>() / g.len() as f64;
    let mut objective = 0.0;
    for (k, &t) in active.iter().enumerate() {
        let r = if mean_ratio > 0.0 {
            ratio[k] / mean_ratio
        } else {
            1.0
        };
        let target = g_bar * r.powf(state.alpha);
        targets[t.index()] = Some(target);
        objective += (g[k] - target).abs();
        let diff = g[k] - target;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        let lam = &mut state.lambda[t.index()];
        *lam = (*lam - lr * sign * g[k] / *lam).max(MIN_WEIGHT);
    }
    renormalize(&mut state.lambda);
    Ok(GradNormUpdate { objective, targets })
}

fn renormalize(lambda: &mut [f64; 4]) {
    let n = lambda.len() as f64;
    let sum: f64 = lambda.iter().sum();
    for l in lambda.iter_mut() {
        *l *= n / sum;
    }
}
