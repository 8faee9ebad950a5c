//! Image encoder: convolutional backbone and FPN neck.

use candle_core::{Module, Tensor};
use candle_nn::Conv2d;

use crate::error::{Error, Result};
use crate::model::layers::{conv2d, conv2d_init};
use crate::model::params::{Builder, Init};

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const NECK_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];

/// Backbone outputs C2..C5, each `(B, C_i, H/s_i, W/s_i)`.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub c: [Tensor; 4],
}

/// Neck outputs P2..P6 with a common channel width.
#[derive(Debug, Clone)]
pub struct NeckFeatures {
    pub p: [Tensor; 5],
}

impl NeckFeatures {
    /// Level `l` in `2..=6`.
    pub fn level(&self, l: usize) -> &Tensor {
        &self.p[l - 2]
    }

    pub fn select_rows(&self, idx: &Tensor) -> Result<NeckFeatures> {
        let p = self.p.clone().map(|t| t.index_select(idx, 0));
        let [a, b, c, d, e] = p;
        Ok(NeckFeatures {
            p: [a?, b?, c?, d?, e?],
        })
    }
}

pub fn check_input(image: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = image
        .dims4()
        .map_err(|_| Error::Shape(format!("expected (B,3,H,W), got {:?}", image.dims())))?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if h == 0 || w == 0 || h % 64 != 0 || w % 64 != 0 {
        return Err(Error::Shape(format!(
            "image size {h}x{w} is not a multiple of 64"
        )));
    }
    Ok((b, h, w))
}

/// Anything that maps images to a stride-4..32 pyramid.
pub trait Backbone: Send + Sync {
    fn forward(&self, image: &Tensor) -> Result<Pyramid>;
    fn out_channels(&self) -> [usize; 4];
}

/// Small four-stage convolutional backbone.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    stem: Conv2d,
    stages: Vec<(Conv2d, Conv2d)>,
    widths: [usize; 4],
}

impl ConvBackbone {
    pub fn new(pb: &Builder, widths: [usize; 4]) -> Result<Self> {
        let stem = conv2d(&pb.pp("stem"), 3, widths[0], 3, 2, true)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let sb = pb.pp(format!("stage{i}"));
            stages.push((
                conv2d(&sb.pp("down"), cin, w, 3, 2, true)?,
                conv2d(&sb.pp("conv"), w, w, 3, 1, true)?,
            ));
            cin = w;
        }
        Ok(ConvBackbone {
            stem,
            stages,
            widths,
        })
    }
}

impl Backbone for ConvBackbone {
    fn forward(&self, image: &Tensor) -> Result<Pyramid> {
        check_input(image)?;
        let mut x = self.stem.forward(image)?.relu()?;
        let mut out = Vec::with_capacity(4);
        for (down, conv) in &self.stages {
            x = down.forward(&x)?.relu()?;
            x = conv.forward(&x)?.relu()?;
            out.push(x.clone());
        }
        let [c2, c3, c4, c5]: [Tensor; 4] = out.try_into().expect("four stages");
        Ok(Pyramid {
            c: [c2, c3, c4, c5],
        })
    }

    fn out_channels(&self) -> [usize; 4] {
        self.widths
    }
}

/// Top-down feature pyramid: 1×1 laterals, nearest-neighbour top-down
/// fusion, 3×3 output convs, and a stride-2 conv on P5 for P6.
#[derive(Debug, Clone)]
pub struct Fpn {
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
    extra: Conv2d,
    in_channels: [usize; 4],
}

impl Fpn {
    pub fn new(pb: &Builder, in_channels: [usize; 4], d: usize, bias: bool) -> Result<Self> {
        let mut lateral = Vec::new();
        let mut output = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            lateral.push(conv2d(
                &pb.pp(format!("lateral{}", i + 2)),
                c,
                d,
                1,
                1,
                bias,
            )?);
            output.push(conv2d(
                &pb.pp(format!("output{}", i + 2)),
                d,
                d,
                3,
                1,
                bias,
            )?);
        }
        let bound = 1.0 / ((d * 9) as f64).sqrt();
        let extra = conv2d_init(
            &pb.pp("p6"),
            d,
            d,
            3,
            2,
            Init::Uniform(bound),
            bias.then_some(Init::Uniform(bound)),
        )?;
        Ok(Fpn {
            lateral,
            output,
            extra,
            in_channels,
        })
    }

    pub fn forward(&self, pyr: &Pyramid) -> Result<NeckFeatures> {
        for (i, c) in pyr.c.iter().enumerate() {
            let got = c.dim(1)?;
            if got != self.in_channels[i] {
                return Err(Error::Config(format!(
                    "C{} has {got} channels, neck expects {}",
                    i + 2,
                    self.in_channels[i]
                )));
            }
        }
        let mut top = self.lateral[3].forward(&pyr.c[3])?;
        let mut merged = vec![top.clone()];
        for i in (0..3).rev() {
            let (_, _, h, w) = pyr.c[i].dims4()?;
            top = (self.lateral[i].forward(&pyr.c[i])? + top.upsample_nearest2d(h, w)?)?;
            merged.push(top.clone());
        }
        merged.reverse();
        let outs: Vec<Tensor> = merged
            .iter()
            .zip(&self.output)
            .map(|(m, conv)| conv.forward(m))
            .collect::<candle_core::Result<_>>()?;
        let p6 = self.extra.forward(&outs[3])?;
        let [p2, p3, p4, p5]: [Tensor; 4] = outs.try_into().expect("four levels");
        Ok(NeckFeatures {
            p: [p2, p3, p4, p5, p6],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use candle_core::{DType, Device};

    fn spatial(t: &Tensor) -> (usize, usize) {
        let (_, _, h, w) = t.dims4().unwrap();
        (h, w)
    }

    fn build(bias: bool) -> (ConvBackbone, Fpn) {
        let s = ParamStore::new(1, DType::F32);
        let bb = ConvBackbone::new(&s.root().pp("backbone"), [4, 6, 8, 10]).unwrap();
        let fpn = Fpn::new(&s.root().pp("neck"), bb.out_channels(), 8, bias).unwrap();
        (bb, fpn)
    }

    #[test]
    fn strides_exact() {
        let (bb, fpn) = build(true);
        for (h, w) in [(256, 256), (128, 192), (64, 128)] {
            let img = Tensor::zeros((1, 3, h, w), DType::F32, &Device::Cpu).unwrap();
            let pyr = bb.forward(&img).unwrap();
            for (c, s) in pyr.c.iter().zip(PYRAMID_STRIDES) {
                assert_eq!(spatial(c), (h / s, w / s));
            }
            let neck = fpn.forward(&pyr).unwrap();
            for (p, s) in neck.p.iter().zip(NECK_STRIDES) {
                assert_eq!(spatial(p), (h / s, w / s));
                assert_eq!(p.dim(1).unwrap(), 8);
                let m = p
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f32>()
                    .unwrap();
                assert!(m.is_finite());
            }
        }
    }

    #[test]
    fn rejects_bad_size() {
        let (bb, _) = build(true);
        let img = Tensor::zeros((1, 3, 100, 128), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.forward(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_pyramid_without_bias_is_zero() {
        let (bb, fpn) = build(false);
        let pyr = Pyramid {
            c: [4, 6, 8, 10]
                .into_iter()
                .zip(PYRAMID_STRIDES)
                .map(|(c, s)| {
                    Tensor::zeros((1, c, 128 / s, 128 / s), DType::F32, &Device::Cpu).unwrap()
                })
                .collect::<Vec<_>>()
                .try_into()
                .unwrap(),
        };
        let _ = bb;
        for p in fpn.forward(&pyr).unwrap().p {
            assert_eq!(
                p.abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f32>()
                    .unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let (_, fpn) = build(true);
        let pyr = Pyramid {
            c: [5, 6, 8, 10]
                .into_iter()
                .zip(PYRAMID_STRIDES)
                .map(|(c, s)| {
                    Tensor::zeros((1, c, 128 / s, 128 / s), DType::F32, &Device::Cpu).unwrap()
                })
                .collect::<Vec<_>>()
                .try_into()
                .unwrap(),
        };
        assert!(matches!(fpn.forward(&pyr), Err(Error::Config(_))));
    }

    fn changed(a: &NeckFeatures, b: &NeckFeatures) -> Vec<bool> {
        a.p.iter()
            .zip(&b.p)
            .map(|(x, y)| {
                (x - y)
                    .unwrap()
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f32>()
                    .unwrap()
                    > 0.0
            })
            .collect()
    }

    #[test]
    fn top_down_flow() {
        let (bb, fpn) = build(true);
        let img = Tensor::rand(0f32, 1.0, (1, 3, 128, 128), &Device::Cpu).unwrap();
        let pyr = bb.forward(&img).unwrap();
        let base = fpn.forward(&pyr).unwrap();

        let mut c5 = pyr.clone();
        c5.c[3] = (&c5.c[3] + 0.5).unwrap();
        assert_eq!(changed(&base, &fpn.forward(&c5).unwrap()), vec![true; 5]);

        let mut c2 = pyr.clone();
        c2.c[0] = (&c2.c[0] + 0.5).unwrap();
        assert_eq!(
            changed(&base, &fpn.forward(&c2).unwrap()),
            vec![true, false, false, false, false]
        );
    }
}
