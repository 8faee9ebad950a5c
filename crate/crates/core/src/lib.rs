//! Multi-task driving perception with visual-exemplar task prompts.
//!
//! A shared image encoder feeds detection, semantic segmentation, drivable
//! area, and lane heads. Task prompts built from a handful of exemplar images
//! are fused into the features before the heads.

pub mod balancing;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod prompting;
pub mod runner;
pub mod schedule;
pub mod tasks;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tasks::{PerTask, TaskKind, TaskSet};
