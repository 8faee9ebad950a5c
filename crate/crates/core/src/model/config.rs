use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel widths of C2..C5.
    pub backbone_widths: [usize; 4],
    pub d_model: usize,
    pub neck_bias: bool,
    pub encoder_depth: usize,
    /// Head count of every attention block.
    pub encoder_heads: usize,
    pub ffn_hidden: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    /// Width of the per-level convolutions in the segmentation heads.
    pub seg_dim: usize,
    pub matcher: MatcherConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_widths: [16, 32, 48, 64],
            d_model: 64,
            neck_bias: true,
            encoder_depth: 3,
            encoder_heads: 4,
            ffn_hidden: 128,
            decoder_layers: 4,
            num_queries: 20,
            seg_dim: 32,
            matcher: MatcherConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration that still exercises every component.
    pub fn tiny(d_model: usize) -> Self {
        ModelConfig {
            backbone_widths: [4, 4, 8, 8],
            d_model,
            encoder_depth: 1,
            encoder_heads: 2,
            ffn_hidden: 2 * d_model,
            decoder_layers: 1,
            num_queries: 4,
            seg_dim: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of 4",
                self.d_model
            )));
        }
        if self.encoder_heads == 0 || self.d_model % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {} must divide d_model {}",
                self.encoder_heads, self.d_model
            )));
        }
        if self.backbone_widths.contains(&0) || self.seg_dim == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be positive".into()));
        }
        Ok(())
    }
}

/// Matching costs and loss weights of the detection head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub cost_class: f64,
    pub cost_l1: f64,
    pub cost_giou: f64,
    pub loss_class: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            cost_class: 2.0,
            cost_l1: 5.0,
            cost_giou: 2.0,
            loss_class: 1.0,
            loss_l1: 5.0,
            loss_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}
