//! Task prompts from visual exemplars and their fusion with features.

pub mod bank;
pub mod encoder;
pub mod exemplars;
pub mod fusion;

use serde::{Deserialize, Serialize};

pub use bank::{
    audit_leakage, build_prompt_bank, encode_prompts, exemplar_manifest_hash, BankSidecar,
    PromptBank,
};
pub use encoder::{ExemplarEncoder, StubEncoder, STUB_DIM};
pub use exemplars::{
    build_exemplar_set, palette_color, render_box_exemplars, render_mask_exemplars, Exemplar,
    ExemplarSet, DEFAULT_ALPHA,
};
pub use fusion::{post_head_prompt, PostHeadBlock, PreHeadBlock, PreHeadTrace};

/// Default exemplar count per category.
pub const DEFAULT_EXEMPLARS: usize = 5;
/// Image embedding width of the ViT-B/32 contrastive encoder.
pub const CLIP_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderBackend {
    Stub,
    Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub enabled: bool,
    pub mode: PromptMode,
    pub backend: EncoderBackend,
    /// Exemplars per category, ordered det, sem, driv, lane.
    pub n: [usize; 4],
    pub trainable: bool,
    /// Start the pre-head block as the identity on P6.
    pub zero_residual: bool,
    pub alpha: f32,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            enabled: true,
            mode: PromptMode::Pre,
            backend: EncoderBackend::Stub,
            n: [DEFAULT_EXEMPLARS; 4],
            trainable: true,
            zero_residual: false,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl PromptConfig {
    pub fn disabled() -> Self {
        PromptConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn uses_pre(&self) -> bool {
        self.enabled && self.mode == PromptMode::Pre
    }

    pub fn uses_post(&self) -> bool {
        self.enabled && self.mode == PromptMode::Post
    }

    /// Prompt embedding width produced by the configured backend.
    pub fn dim(&self) -> usize {
        match self.backend {
            EncoderBackend::Stub => STUB_DIM,
            EncoderBackend::Clip => CLIP_DIM,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.n.iter().any(|&n| n == 0) {
            return Err(crate::Error::Config(
                "exemplar counts must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(crate::Error::Config(format!(
                "overlay alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}
