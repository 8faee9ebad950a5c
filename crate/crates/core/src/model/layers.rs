//! Building blocks composed from differentiable tensor primitives.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear};

use crate::error::Result;
use crate::model::params::{Builder, Init};

pub fn linear(pb: &Builder, din: usize, dout: usize) -> Result<Linear> {
    let bound = 1.0 / (din as f64).sqrt();
    let w = pb.get("weight", &[dout, din], Init::Uniform(bound))?;
    let b = pb.get("bias", &[dout], Init::Uniform(bound))?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_init(pb: &Builder, din: usize, dout: usize, w: Init, b: Init) -> Result<Linear> {
    let w = pb.get("weight", &[dout, din], w)?;
    let b = pb.get("bias", &[dout], b)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn conv2d(
    pb: &Builder,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    bias: bool,
) -> Result<Conv2d> {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    conv2d_init(
        pb,
        cin,
        cout,
        k,
        stride,
        Init::Uniform(bound),
        bias.then_some(Init::Uniform(bound)),
    )
}

pub fn conv2d_init(
    pb: &Builder,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    w: Init,
    b: Option<Init>,
) -> Result<Conv2d> {
    let w = pb.get("weight", &[cout, cin, k, k], w)?;
    let b = b.map(|b| pb.get("bias", &[cout], b)).transpose()?;
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        dilation: 1,
        groups: 1,
        cudnn_fwd_algo: None,
    };
    Ok(Conv2d::new(w, b, cfg))
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &Builder, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: pb.get("weight", &[dim], Init::Const(1.0))?,
            bias: pb.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Multi-head scaled dot-product attention over `(B, L, D)` sequences.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(pb: &Builder, dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        let o = if zero_out {
            linear_init(&pb.pp("o"), dim, dim, Init::Zeros, Init::Zeros)?
        } else {
            linear(&pb.pp("o"), dim, dim)?
        };
        Ok(Attention {
            q: linear(&pb.pp("q"), dim, dim)?,
            k: linear(&pb.pp("k"), dim, dim)?,
            v: linear(&pb.pp("v"), dim, dim)?,
            o,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        x.reshape((b, l, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Returns the output and the attention weights `(B, heads, Lq, Lk)`.
    pub fn forward_with_weights(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (b, lq, d) = q.dims3()?;
        let dh = d / self.heads;
        let qh = self.split(&self.q.forward(q)?)?;
        let kh = self.split(&self.k.forward(k)?)?;
        let vh = self.split(&self.v.forward(v)?)?;
        let scores = (qh.matmul(&kh.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&vh)?.transpose(1, 2)?.reshape((b, lq, d))?;
        Ok((self.o.forward(&out)?, attn))
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(q, k, v)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(pb: &Builder, dim: usize, hidden: usize, zero_out: bool) -> Result<Self> {
        let l2 = if zero_out {
            linear_init(&pb.pp("l2"), hidden, dim, Init::Zeros, Init::Zeros)?
        } else {
            linear(&pb.pp("l2"), hidden, dim)?
        };
        Ok(FeedForward {
            l1: linear(&pb.pp("l1"), dim, hidden)?,
            l2,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width from input to output. When `zero_last` is set
    /// the final layer starts at zero.
    pub fn new(pb: &Builder, dims: &[usize], zero_last: bool) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let lb = pb.pp(i);
            layers.push(if zero_last && i + 1 == n {
                linear_init(&lb, dims[i], dims[i + 1], Init::Zeros, Init::Zeros)?
            } else {
                linear(&lb, dims[i], dims[i + 1])?
            });
        }
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Mlp { layers }
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

/// Interpolation matrix `(out, in)` for 1-D bilinear resampling with
/// half-pixel centers (`align_corners = false`).
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of `(B, C, h, w)` to `(B, C, H, W)`.
pub fn resize_bilinear(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (h_out, w_out) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let ah = matrix(bilinear_matrix(h_out, h), (h_out, h), dt, dev)?;
    let awt = matrix(bilinear_matrix(w_out, w), (w_out, w), dt, dev)?
        .t()?
        .contiguous()?;
    let x = x.contiguous()?.broadcast_matmul(&awt)?;
    Ok(ah.broadcast_matmul(&x)?)
}

fn matrix(v: Vec<f64>, shape: (usize, usize), dt: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dt)?)
}

/// `(B, D, h, w)` → `(B, h·w, D)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `(B, h·w, D)` → `(B, D, h, w)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    if l != h * w {
        return Err(crate::Error::Shape(format!(
            "{l} tokens cannot form a {h}x{w} map"
        )));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, d, h, w))?)
}
