//! Semantic-FPN segmentation head.

use candle_core::{DType, Module, Tensor};
use candle_nn::Conv2d;

use crate::error::{Error, Result};
use crate::model::layers::{conv2d, resize_bilinear};
use crate::model::params::Builder;

#[derive(Debug, Clone)]
pub struct SegHead {
    level_convs: Vec<Conv2d>,
    extra_conv: Conv2d,
    classifier: Conv2d,
    k: usize,
}

impl SegHead {
    pub fn new(pb: &Builder, d: usize, seg_dim: usize, k: usize) -> Result<Self> {
        Ok(SegHead {
            level_convs: (0..4)
                .map(|i| conv2d(&pb.pp(format!("level{i}")), d, seg_dim, 3, 1, true))
                .collect::<Result<_>>()?,
            // bias-free so a zero extra input adds exactly nothing
            extra_conv: conv2d(&pb.pp("extra"), d, seg_dim, 3, 1, false)?,
            classifier: conv2d(&pb.pp("classifier"), seg_dim, k, 1, 1, true)?,
            k,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Merged stride-4 feature: every level (and the optional extra map) is
    /// convolved, resized to the first level's size, and summed.
    pub fn merge(&self, levels: &[Tensor], extra: Option<&Tensor>) -> Result<Tensor> {
        if levels.len() != 4 {
            return Err(Error::Shape(format!(
                "segmentation head takes 4 levels, got {}",
                levels.len()
            )));
        }
        let (_, _, h, w) = levels[0].dims4()?;
        let mut sum = self.level_convs[0].forward(&levels[0])?.relu()?;
        for (conv, l) in self.level_convs.iter().zip(levels).skip(1) {
            sum = (sum + resize_bilinear(&conv.forward(l)?.relu()?, h, w)?)?;
        }
        if let Some(e) = extra {
            sum = (sum + resize_bilinear(&self.extra_conv.forward(e)?.relu()?, h, w)?)?;
        }
        Ok(sum)
    }

    /// Per-pixel logits `(B, K, H, W)` at `4×` the first level's resolution.
    pub fn forward(&self, levels: &[Tensor], extra: Option<&Tensor>) -> Result<Tensor> {
        let merged = self.merge(levels, extra)?;
        let (_, _, h, w) = merged.dims4()?;
        resize_bilinear(&self.classifier.forward(&merged)?, 4 * h, 4 * w)
    }

    pub fn forward_checked(
        &self,
        levels: &[Tensor],
        extra: Option<&Tensor>,
        k: usize,
    ) -> Result<Tensor> {
        if k != self.k {
            return Err(Error::Config(format!(
                "head has {} classes, requested {k}",
                self.k
            )));
        }
        self.forward(levels, extra)
    }
}

pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, 1)?)
}

/// Per-image mean pixel cross-entropy `(B,)` against `(B, H, W)` labels.
pub fn pixel_ce(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = logits.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "labels {:?} vs logits {:?}",
            labels.dims(),
            logits.dims()
        )));
    }
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let idx = labels.to_dtype(DType::U32)?.unsqueeze(1)?;
    let picked = logp.gather(&idx, 1)?.squeeze(1)?;
    Ok((picked.flatten_from(1)?.mean(1)? * -1.0)?)
}

/// Argmax label map `(B, H, W)` as `u8`.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<ndarray::Array2<u8>>> {
    let (b, _, h, w) = logits.dims4()?;
    let am = logits.argmax(1)?.to_dtype(DType::U8)?;
    (0..b)
        .map(|i| {
            let v = am.get(i)?.flatten_all()?.to_vec1::<u8>()?;
            Ok(ndarray::Array2::from_shape_vec((h, w), v).expect("shape matches"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use candle_core::Device;

    fn levels(b: usize, d: usize, h: usize, w: usize) -> Vec<Tensor> {
        [4, 8, 16, 32]
            .iter()
            .map(|s| Tensor::randn(0f64, 1.0, (b, d, h / s, w / s), &Device::Cpu).unwrap())
            .collect()
    }

    #[test]
    fn full_resolution_and_normalized() {
        let s = ParamStore::new(0, DType::F64);
        let head = SegHead::new(&s.root(), 8, 4, 19).unwrap();
        let out = head.forward(&levels(2, 8, 128, 192), None).unwrap();
        assert_eq!(out.dims(), &[2, 19, 128, 192]);
        let sums = probabilities(&out)
            .unwrap()
            .sum(1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn constant_field_from_bias() {
        let s = ParamStore::new(0, DType::F64);
        let head = SegHead::new(&s.root(), 8, 4, 3).unwrap();
        for name in s.names() {
            let v = s.var(&name).unwrap();
            s.set(&name, &v.zeros_like().unwrap()).unwrap();
        }
        let bias = [0.5f64, -1.0, 2.0];
        s.set(
            "classifier.bias",
            &Tensor::new(&bias, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let p = probabilities(&head.forward(&levels(1, 8, 64, 64), None).unwrap()).unwrap();
        let z: f64 = bias.iter().map(|b| b.exp()).sum();
        let want: Vec<f64> = bias.iter().map(|b| b.exp() / z).collect();
        let p = p
            .squeeze(0)
            .unwrap()
            .flatten_from(1)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for (c, row) in p.iter().enumerate() {
            assert!(row.iter().all(|v| (v - want[c]).abs() < 1e-9));
        }
    }

    #[test]
    fn zero_extra_is_exact_noop() {
        let s = ParamStore::new(3, DType::F64);
        let head = SegHead::new(&s.root(), 8, 4, 2).unwrap();
        let lv = levels(1, 8, 64, 64);
        let zero = Tensor::zeros((1, 8, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let a = head
            .merge(&lv, None)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let b = head
            .merge(&lv, Some(&zero))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_count_mismatch() {
        let s = ParamStore::new(0, DType::F64);
        let head = SegHead::new(&s.root(), 8, 4, 2).unwrap();
        assert!(matches!(
            head.forward_checked(&levels(1, 8, 64, 64), None, 19),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Tensor::zeros((2, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let labels = Tensor::zeros((2, 2, 2), DType::U8, &Device::Cpu).unwrap();
        let ce = pixel_ce(&logits, &labels)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(ce.iter().all(|v| (v - 4f64.ln()).abs() < 1e-12));
    }
}
