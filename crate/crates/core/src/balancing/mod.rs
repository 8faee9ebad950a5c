//! Turning per-task losses into one training objective.

pub mod combine;
pub mod gradnorm;
pub mod min_norm;

use serde::{Deserialize, Serialize};

pub use combine::{
    fixed_combine, flat_grad, l2_norm, mgda_combine, mgda_weights, uncertainty_combine,
    validate_lambda, TaskLosses, DEFAULT_LAMBDA,
};
pub use gradnorm::{gradnorm_step, GradNormState, GradNormUpdate, DEFAULT_ALPHA};
pub use min_norm::{frank_wolfe, gram, min_norm_point, two_task_closed_form, MinNormSolution};

/// Shared parameters a gradient-based balancer differentiates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradScope {
    /// Output conv of the P5 level in the neck.
    LastP5,
    /// Backbone plus neck.
    ImageEncoder,
    /// Backbone, neck, and shared transformer encoder.
    SharedEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BalanceStrategy {
    Fixed {
        #[serde(default = "default_lambda")]
        lambda: [f64; 4],
    },
    Uncertainty,
    #[serde(rename = "gradnorm")]
    GradNorm {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_gradnorm_lr")]
        lr: f64,
        #[serde(default = "default_gradnorm_scope")]
        scope: GradScope,
    },
    Mgda {
        #[serde(default = "default_mgda_scope")]
        scope: GradScope,
    },
}

impl Default for BalanceStrategy {
    fn default() -> Self {
        BalanceStrategy::Fixed {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl BalanceStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            BalanceStrategy::Fixed { .. } => "fixed",
            BalanceStrategy::Uncertainty => "uncertainty",
            BalanceStrategy::GradNorm { .. } => "gradnorm",
            BalanceStrategy::Mgda { .. } => "mgda",
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        match self {
            BalanceStrategy::Fixed { lambda } => validate_lambda(lambda),
            BalanceStrategy::GradNorm { alpha, lr, .. } if !(*alpha >= 0.0) || !(*lr > 0.0) => Err(
                crate::Error::Config(format!("gradnorm alpha {alpha} / lr {lr} out of range")),
            ),
            _ => Ok(()),
        }
    }
}

fn default_lambda() -> [f64; 4] {
    DEFAULT_LAMBDA
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_gradnorm_lr() -> f64 {
    0.025
}
fn default_gradnorm_scope() -> GradScope {
    GradScope::LastP5
}
fn default_mgda_scope() -> GradScope {
    GradScope::SharedEncoder
}

/// Snapshot of balancer state for the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancerState {
    pub strategy: String,
    pub lambda: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_var: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l0: Option<[Option<f64>; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mgda_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mgda_gap: Option<f64>,
}
