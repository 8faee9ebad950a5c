//! Fusing task prompts with neck features, before or after the task head.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use crate::error::{Error, Result};
use crate::model::layers::{
    from_tokens, linear, to_tokens, Attention, FeedForward, LayerNorm, Mlp,
};
use crate::model::params::Builder;

/// Prompted P6: `f_pre = TransDecoder(q = P6, k = p, v = p)`, one pre-norm
/// cross-attention layer with residual connections. Prompts enter through a
/// linear `D → D_model` adapter.
#[derive(Debug, Clone)]
pub struct PreHeadBlock {
    adapter: Linear,
    norm_q: LayerNorm,
    attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
    prompt_dim: usize,
}

/// Intermediate values of a pre-head pass.
#[derive(Debug, Clone)]
pub struct PreHeadTrace {
    /// `(B, D_model, h, w)`
    pub f_pre: Tensor,
    /// `(B, heads, h·w, K)`
    pub attention: Tensor,
    /// Cross-attention output before the residual, `(B, h·w, D_model)`.
    pub attended: Tensor,
}

impl PreHeadBlock {
    /// With `zero_residual` the attention output and FFN start at zero, so the
    /// block is initially the identity on P6.
    pub fn new(
        pb: &Builder,
        prompt_dim: usize,
        d: usize,
        heads: usize,
        hidden: usize,
        zero_residual: bool,
    ) -> Result<Self> {
        Ok(PreHeadBlock {
            adapter: linear(&pb.pp("adapter"), prompt_dim, d)?,
            norm_q: LayerNorm::new(&pb.pp("norm_q"), d)?,
            attn: Attention::new(&pb.pp("attn"), d, heads, zero_residual)?,
            norm_ffn: LayerNorm::new(&pb.pp("norm_ffn"), d)?,
            ffn: FeedForward::new(&pb.pp("ffn"), d, hidden, zero_residual)?,
            prompt_dim,
        })
    }

    pub fn trace(&self, p6: &Tensor, prompt: &Tensor) -> Result<PreHeadTrace> {
        let (b, _, h, w) = p6.dims4()?;
        let (_, dp) = prompt.dims2()?;
        if dp != self.prompt_dim {
            return Err(Error::Config(format!(
                "prompt width {dp}, adapter expects {}",
                self.prompt_dim
            )));
        }
        let kv = self.adapter.forward(prompt)?.unsqueeze(0)?;
        let (_, k, d) = kv.dims3()?;
        let kv = kv.broadcast_as((b, k, d))?.contiguous()?;
        let q = to_tokens(p6)?;
        let (attended, attention) =
            self.attn
                .forward_with_weights(&self.norm_q.forward(&q)?, &kv, &kv)?;
        let x = (&q + &attended)?;
        let x = (&x + self.ffn.forward(&self.norm_ffn.forward(&x)?)?)?;
        Ok(PreHeadTrace {
            f_pre: from_tokens(&x, h, w)?,
            attention,
            attended,
        })
    }

    pub fn forward(&self, p6: &Tensor, prompt: &Tensor) -> Result<Tensor> {
        Ok(self.trace(p6, prompt)?.f_pre)
    }
}

/// Prompt-conditioned refinement of head outputs:
/// `f_post = TransDecoder(q = p, k = P6, v = P6)` and `v' = MLP(v · f_post)`.
#[derive(Debug, Clone)]
pub struct PostHeadBlock {
    adapter: Linear,
    norm_q: LayerNorm,
    attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
    mlp: Mlp,
    prompt_dim: usize,
}

impl PostHeadBlock {
    pub fn new(
        pb: &Builder,
        prompt_dim: usize,
        d: usize,
        heads: usize,
        hidden: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(PostHeadBlock {
            adapter: linear(&pb.pp("adapter"), prompt_dim, d)?,
            norm_q: LayerNorm::new(&pb.pp("norm_q"), d)?,
            attn: Attention::new(&pb.pp("attn"), d, heads, false)?,
            norm_ffn: LayerNorm::new(&pb.pp("norm_ffn"), d)?,
            ffn: FeedForward::new(&pb.pp("ffn"), d, hidden, false)?,
            mlp: Mlp::new(&pb.pp("mlp"), &[d, d, k], false)?,
            prompt_dim,
        })
    }

    /// `(B, K, D_model)` prompt features attended over P6.
    pub fn f_post(&self, prompt: &Tensor, p6: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = p6.dims4()?;
        let (_, dp) = prompt.dims2()?;
        if dp != self.prompt_dim {
            return Err(Error::Config(format!(
                "prompt width {dp}, adapter expects {}",
                self.prompt_dim
            )));
        }
        let q = self.adapter.forward(prompt)?.unsqueeze(0)?;
        let (_, k, d) = q.dims3()?;
        let q = q.broadcast_as((b, k, d))?.contiguous()?;
        let kv = to_tokens(p6)?;
        let x = (&q + self.attn.forward(&self.norm_q.forward(&q)?, &kv, &kv)?)?;
        Ok((&x + self.ffn.forward(&self.norm_ffn.forward(&x)?)?)?)
    }

    pub fn forward(&self, v: &Tensor, prompt: &Tensor, p6: &Tensor) -> Result<Tensor> {
        post_head_prompt(v, &self.f_post(prompt, p6)?, &self.mlp)
    }
}

/// `v' = MLP(v · f_post)` for `v: (B, N, K)` and `f_post: (B, K, D)`.
pub fn post_head_prompt(v: &Tensor, f_post: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    let (b, _, k) = v.dims3()?;
    let (bf, kf, _) = f_post.dims3()?;
    if k != kf || b != bf {
        return Err(Error::Shape(format!(
            "head output {:?} vs prompt features {:?}",
            v.dims(),
            f_post.dims()
        )));
    }
    Ok(mlp.forward(&v.contiguous()?.matmul(&f_post.contiguous()?)?)?)
}
