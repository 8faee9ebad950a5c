//! Flattening with positional embeddings and the shared transformer encoder.

use candle_core::{DType, Device, Module, Tensor};

use crate::error::{Error, Result};
use crate::model::layers::{from_tokens, to_tokens, Attention, FeedForward, LayerNorm};
use crate::model::params::{Builder, Init};

/// Number of learned level offsets, one per slot P3..P6.
pub const LEVEL_SLOTS: usize = 4;

/// Fixed 2-D sinusoidal embedding `(h·w, d)`: the first half encodes the row,
/// the second half the column, alternating sin/cos per frequency.
pub fn sine_2d(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    let two_pi = 2.0 * std::f64::consts::PI;
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * d;
            let coords = [
                (y as f64 + 0.5) / h as f64 * two_pi,
                (x as f64 + 0.5) / w as f64 * two_pi,
            ];
            for (axis, c) in coords.iter().enumerate() {
                for j in 0..half {
                    let freq = 10000f64.powf((2 * (j / 2)) as f64 / half as f64);
                    let v = c / freq;
                    out[base + axis * half + j] = if j % 2 == 0 { v.sin() } else { v.cos() };
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    level_embed: Tensor,
    d: usize,
}

impl PositionalEncoding {
    pub fn new(pb: &Builder, d: usize) -> Result<Self> {
        Ok(PositionalEncoding {
            level_embed: pb.get("level_embed", &[LEVEL_SLOTS, d], Init::Normal(0.5))?,
            d,
        })
    }

    /// Embedding `(h·w, d)` for a map at level slot `slot`.
    pub fn embed(
        &self,
        h: usize,
        w: usize,
        slot: usize,
        dtype: DType,
        dev: &Device,
    ) -> Result<Tensor> {
        if slot >= LEVEL_SLOTS {
            return Err(Error::Shape(format!("level slot {slot} out of range")));
        }
        let sine =
            Tensor::from_vec(sine_2d(h, w, self.d), (h * w, self.d), dev)?.to_dtype(dtype)?;
        let lvl = self.level_embed.get(slot)?.unsqueeze(0)?;
        Ok(sine.broadcast_add(&lvl)?)
    }
}

/// Flattened multi-level feature sequence.
#[derive(Debug, Clone)]
pub struct FlattenedSequence {
    /// `(B, L, D)`
    pub tokens: Tensor,
    /// `(1, L, D)`
    pub pos: Tensor,
    pub level_shapes: Vec<(usize, usize)>,
}

impl FlattenedSequence {
    pub fn len(&self) -> usize {
        self.level_shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Split a `(B, L, D)` sequence back into per-level `(B, D, h, w)` maps.
    pub fn unflatten(&self, tokens: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.level_shapes.len());
        let mut start = 0;
        for &(h, w) in &self.level_shapes {
            out.push(from_tokens(&tokens.narrow(1, start, h * w)?, h, w)?);
            start += h * w;
        }
        Ok(out)
    }
}

/// Flatten `(map, level slot)` pairs in order and attach positional embeddings.
pub fn flatten_with_pos(
    levels: &[(&Tensor, usize)],
    pe: &PositionalEncoding,
) -> Result<FlattenedSequence> {
    if levels.is_empty() {
        return Err(Error::Shape("no levels to flatten".into()));
    }
    let mut tokens = Vec::new();
    let mut pos = Vec::new();
    let mut shapes = Vec::new();
    for (map, slot) in levels {
        let (_, _, h, w) = map.dims4()?;
        tokens.push(to_tokens(map)?);
        pos.push(pe.embed(h, w, *slot, map.dtype(), map.device())?);
        shapes.push((h, w));
    }
    Ok(FlattenedSequence {
        tokens: Tensor::cat(&tokens, 1)?,
        pos: Tensor::cat(&pos, 0)?.unsqueeze(0)?,
        level_shapes: shapes,
    })
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    n1: LayerNorm,
    attn: Attention,
    n2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.n1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h)?)?;
        let h = self.n2.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Pre-norm transformer encoder over `P + p_l`. Depth 0 is the identity.
#[derive(Debug, Clone)]
pub struct SharedEncoder {
    layers: Vec<EncoderLayer>,
    norm: Option<LayerNorm>,
}

/// Encoder output and its per-level views.
#[derive(Debug, Clone)]
pub struct EnhancedFeatures {
    /// `(B, L, D)`
    pub o: Tensor,
    pub z: Vec<Tensor>,
    pub seq: FlattenedSequence,
}

impl SharedEncoder {
    pub fn new(pb: &Builder, d: usize, depth: usize, heads: usize, hidden: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let lb = pb.pp(format!("layer{i}"));
            layers.push(EncoderLayer {
                n1: LayerNorm::new(&lb.pp("norm1"), d)?,
                attn: Attention::new(&lb.pp("attn"), d, heads, false)?,
                n2: LayerNorm::new(&lb.pp("norm2"), d)?,
                ffn: FeedForward::new(&lb.pp("ffn"), d, hidden, false)?,
            });
        }
        let norm = if depth > 0 {
            Some(LayerNorm::new(&pb.pp("norm"), d)?)
        } else {
            None
        };
        Ok(SharedEncoder { layers, norm })
    }

    pub fn encode_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for l in &self.layers {
            x = l.forward(&x)?;
        }
        if let Some(n) = &self.norm {
            x = n.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, seq: FlattenedSequence) -> Result<EnhancedFeatures> {
        let o = self.encode_tokens(&seq.tokens.broadcast_add(&seq.pos)?)?;
        let z = seq.unflatten(&o)?;
        Ok(EnhancedFeatures { o, z, seq })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;

    fn maps(b: usize, d: usize, sizes: &[(usize, usize)]) -> Vec<Tensor> {
        sizes
            .iter()
            .map(|&(h, w)| Tensor::randn(0f64, 1.0, (b, d, h, w), &Device::Cpu).unwrap())
            .collect()
    }

    #[test]
    fn detection_sequence_length() {
        let s = ParamStore::new(0, DType::F64);
        let pe = PositionalEncoding::new(&s.root(), 8).unwrap();
        let m = maps(1, 8, &[(32, 32), (16, 16), (8, 8), (4, 4)]);
        let levels: Vec<(&Tensor, usize)> = m.iter().zip(0..).collect();
        let seq = flatten_with_pos(&levels, &pe).unwrap();
        assert_eq!(seq.len(), 1360);
        assert_eq!(seq.tokens.dims(), &[1, 1360, 8]);
        let back = seq.unflatten(&seq.tokens).unwrap();
        for (a, b) in back.iter().zip(&m) {
            let a = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn level_offsets_distinguish_equal_shapes() {
        let s = ParamStore::new(0, DType::F64);
        let pe = PositionalEncoding::new(&s.root(), 8).unwrap();
        let a = pe.embed(4, 4, 0, DType::F64, &Device::Cpu).unwrap();
        let b = pe.embed(4, 4, 3, DType::F64, &Device::Cpu).unwrap();
        let diff = (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn depth_zero_is_identity() {
        let s = ParamStore::new(0, DType::F64);
        let pe = PositionalEncoding::new(&s.root().pp("pos"), 8).unwrap();
        let enc = SharedEncoder::new(&s.root().pp("enc"), 8, 0, 2, 16).unwrap();
        let m = maps(2, 8, &[(4, 4)]);
        let seq = flatten_with_pos(&[(&m[0], 3)], &pe).unwrap();
        let expect = seq.tokens.broadcast_add(&seq.pos).unwrap();
        let out = enc.forward(seq).unwrap();
        let d = (out.o - expect)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn permutation_equivariant() {
        let s = ParamStore::new(5, DType::F64);
        let enc = SharedEncoder::new(&s.root(), 8, 2, 2, 16).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 6, 8), &Device::Cpu).unwrap();
        let perm: Vec<u32> = vec![3, 0, 5, 1, 4, 2];
        let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
        let a = enc
            .encode_tokens(&x)
            .unwrap()
            .index_select(&idx, 1)
            .unwrap();
        let b = enc
            .encode_tokens(&x.index_select(&idx, 1).unwrap())
            .unwrap();
        let d = (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-12, "{d}");
    }
}
