//! Query-based detection head, Hungarian matching, and the set loss.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::Linear;

use crate::data::{BoxAnnotation, ScoredBox};
use crate::error::{Error, Result};
use crate::model::config::MatcherConfig;
use crate::model::hungarian;
use crate::model::layers::{linear_init, Attention, FeedForward, LayerNorm, Mlp};
use crate::model::params::{Builder, Init};

/// Logit bias giving an initial foreground probability of 0.01.
pub const PRIOR_BIAS: f64 = -4.595_119_850_134_59;

#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// `(B, N_q, K)`
    pub logits: Tensor,
    /// `(B, N_q, 4)` normalized `(cx, cy, w, h)`.
    pub boxes: Tensor,
}

/// Ground truth for one image: categories and normalized `(cx, cy, w, h)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetTarget {
    pub labels: Vec<usize>,
    pub boxes: Vec<[f64; 4]>,
}

impl DetTarget {
    pub fn from_boxes(boxes: &[BoxAnnotation], height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        DetTarget {
            labels: boxes.iter().map(|b| b.category).collect(),
            boxes: boxes
                .iter()
                .map(|b| {
                    let (x1, y1, x2, y2) = (b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64);
                    [
                        (x1 + x2) / 2.0 / w,
                        (y1 + y2) / 2.0 / h,
                        (x2 - x1) / w,
                        (y2 - y1) / h,
                    ]
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    n1: LayerNorm,
    self_attn: Attention,
    n2: LayerNorm,
    cross_attn: Attention,
    n3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn new(pb: &Builder, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(DecoderLayer {
            n1: LayerNorm::new(&pb.pp("norm1"), d)?,
            self_attn: Attention::new(&pb.pp("self_attn"), d, heads, false)?,
            n2: LayerNorm::new(&pb.pp("norm2"), d)?,
            cross_attn: Attention::new(&pb.pp("cross_attn"), d, heads, false)?,
            n3: LayerNorm::new(&pb.pp("norm3"), d)?,
            ffn: FeedForward::new(&pb.pp("ffn"), d, hidden, false)?,
        })
    }

    fn forward(&self, t: &Tensor, qpos: &Tensor, mem_k: &Tensor, mem: &Tensor) -> Result<Tensor> {
        let h = self.n1.forward(t)?;
        let hq = h.broadcast_add(qpos)?;
        let t = (t + self.self_attn.forward(&hq, &hq, &h)?)?;
        let h = self.n2.forward(&t)?.broadcast_add(qpos)?;
        let t = (&t + self.cross_attn.forward(&h, mem_k, mem)?)?;
        let h = self.n3.forward(&t)?;
        Ok((&t + self.ffn.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    query: Tensor,
    query_pos: Tensor,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    class: Linear,
    bbox: Mlp,
    num_classes: usize,
}

impl DetectionHead {
    pub fn new(
        pb: &Builder,
        d: usize,
        heads: usize,
        hidden: usize,
        layers: usize,
        num_queries: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        Ok(DetectionHead {
            query: pb.get("query", &[num_queries, d], Init::Normal(1.0))?,
            query_pos: pb.get("query_pos", &[num_queries, d], Init::Normal(1.0))?,
            layers: (0..layers)
                .map(|i| DecoderLayer::new(&pb.pp(format!("layer{i}")), d, heads, hidden))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&pb.pp("norm"), d)?,
            class: linear_init(
                &pb.pp("class"),
                d,
                num_classes,
                Init::Uniform(bound),
                Init::Const(PRIOR_BIAS),
            )?,
            bbox: Mlp::new(&pb.pp("bbox"), &[d, d, d, 4], true)?,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Decode against encoder memory `(B, L, D)` with positions `(1, L, D)`.
    pub fn forward(&self, memory: &Tensor, pos: &Tensor) -> Result<DetectionOutput> {
        let (b, _, d) = memory.dims3()?;
        let nq = self.query.dim(0)?;
        let mut t = self
            .query
            .unsqueeze(0)?
            .broadcast_as((b, nq, d))?
            .contiguous()?;
        let qpos = self.query_pos.unsqueeze(0)?;
        let mem_k = memory.broadcast_add(pos)?;
        for l in &self.layers {
            t = l.forward(&t, &qpos, &mem_k, memory)?;
        }
        let t = self.norm.forward(&t)?;
        Ok(DetectionOutput {
            logits: self.class.forward(&t)?,
            boxes: candle_nn::ops::sigmoid(&self.bbox.forward(&t)?)?,
        })
    }
}

fn cxcywh_to_xyxy(b: &[f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (a, b) = (cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
    let area = |x: &[f64; 4]| (x[2] - x[0]).max(0.0) * (x[3] - x[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(&a) + area(&b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Matching cost `(n_gt, n_q)`: focal classification, L1, and negative GIoU.
pub fn matching_cost(
    logits: &[Vec<f64>],
    boxes: &[Vec<f64>],
    target: &DetTarget,
    cfg: &MatcherConfig,
) -> Vec<f64> {
    let nq = logits.len();
    let (a, g) = (cfg.focal_alpha, cfg.focal_gamma);
    let mut cost = Vec::with_capacity(target.labels.len() * nq);
    for (lbl, tb) in target.labels.iter().zip(&target.boxes) {
        for q in 0..nq {
            let p = sigmoid(logits[q][*lbl]);
            let neg = (1.0 - a) * p.powf(g) * -(1.0 - p + 1e-8).ln();
            let pos = a * (1.0 - p).powf(g) * -(p + 1e-8).ln();
            let pb: [f64; 4] = boxes[q][..4].try_into().expect("four box values");
            let l1: f64 = pb.iter().zip(tb).map(|(x, y)| (x - y).abs()).sum();
            cost.push(
                cfg.cost_class * (pos - neg) + cfg.cost_l1 * l1 - cfg.cost_giou * giou(&pb, tb),
            );
        }
    }
    cost
}

/// `(query, target)` pairs minimizing the matching cost.
pub fn match_queries(
    logits: &[Vec<f64>],
    boxes: &[Vec<f64>],
    target: &DetTarget,
    cfg: &MatcherConfig,
) -> Vec<(usize, usize)> {
    let (n, nq) = (target.labels.len(), logits.len());
    if n == 0 {
        return Vec::new();
    }
    let cost = matching_cost(logits, boxes, target, cfg);
    if n <= nq {
        hungarian::assign(&cost, n, nq)
            .into_iter()
            .enumerate()
            .map(|(t, q)| (q, t))
            .collect()
    } else {
        let mut tr = vec![0.0; n * nq];
        for t in 0..n {
            for q in 0..nq {
                tr[q * n + t] = cost[t * nq + q];
            }
        }
        hungarian::assign(&tr, nq, n)
            .into_iter()
            .enumerate()
            .collect()
    }
}

fn tensor_giou(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let corners = |x: &Tensor| -> Result<[Tensor; 4]> {
        let (c, s) = (x.narrow(1, 0, 2)?, (x.narrow(1, 2, 2)? * 0.5)?);
        let lo = (&c - &s)?;
        let hi = (&c + &s)?;
        Ok([
            lo.narrow(1, 0, 1)?,
            lo.narrow(1, 1, 1)?,
            hi.narrow(1, 0, 1)?,
            hi.narrow(1, 1, 1)?,
        ])
    };
    let [ax1, ay1, ax2, ay2] = corners(a)?;
    let [bx1, by1, bx2, by2] = corners(b)?;
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hull = ((ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?
        * (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?)?;
    let iou = (&inter / (&union + 1e-7)?)?;
    Ok((iou - ((&hull - &union)? / (hull + 1e-7)?)?)?)
}

/// Sigmoid focal loss summed over all entries.
pub fn focal_loss_sum(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?;
    let ce = ((logits.relu()? - (logits * targets)?)?
        + ((logits.abs()?.neg()?.exp()? + 1.0)?.log()?))?;
    let one_minus_t = targets.affine(-1.0, 1.0)?;
    let p_t = ((&p * targets)? + (p.affine(-1.0, 1.0)? * &one_minus_t)?)?;
    let modulating = p_t.affine(-1.0, 1.0)?.powf(gamma)?;
    let alpha_t = ((targets * alpha)? + (one_minus_t * (1.0 - alpha))?)?;
    Ok(((ce * modulating)? * alpha_t)?.sum_all()?)
}

/// Set loss for one image with `(N_q, K)` logits and `(N_q, 4)` boxes.
pub fn image_loss(
    logits: &Tensor,
    boxes: &Tensor,
    target: &DetTarget,
    cfg: &MatcherConfig,
) -> Result<Tensor> {
    let (nq, k) = logits.dims2()?;
    let lv = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let bv = boxes.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let matches = match_queries(&lv, &bv, target, cfg);
    let norm = target.labels.len().max(1) as f64;
    let mut onehot = vec![0.0; nq * k];
    for &(q, t) in &matches {
        onehot[q * k + target.labels[t]] = 1.0;
    }
    let dev = logits.device();
    let onehot = Tensor::from_vec(onehot, (nq, k), dev)?.to_dtype(logits.dtype())?;
    let mut loss = (focal_loss_sum(logits, &onehot, cfg.focal_alpha, cfg.focal_gamma)?
        * (cfg.loss_class / norm))?;
    if !matches.is_empty() {
        let qidx: Vec<u32> = matches.iter().map(|(q, _)| *q as u32).collect();
        let gt: Vec<f64> = matches.iter().flat_map(|(_, t)| target.boxes[*t]).collect();
        let pred = boxes.index_select(&Tensor::new(qidx.as_slice(), dev)?, 0)?;
        let gt = Tensor::from_vec(gt, (matches.len(), 4), dev)?.to_dtype(boxes.dtype())?;
        let l1 = (&pred - &gt)?.abs()?.sum_all()?;
        let g = tensor_giou(&pred, &gt)?.affine(-1.0, 1.0)?.sum_all()?;
        loss = ((loss + (l1 * (cfg.loss_l1 / norm))?)? + (g * (cfg.loss_giou / norm))?)?;
    }
    Ok(loss)
}

/// Per-image losses `(n,)` for a batch whose rows align with `targets`.
pub fn batch_losses(
    out: &DetectionOutput,
    targets: &[&DetTarget],
    cfg: &MatcherConfig,
) -> Result<Tensor> {
    let b = out.logits.dim(0)?;
    if b != targets.len() {
        return Err(Error::Shape(format!(
            "{b} predictions for {} targets",
            targets.len()
        )));
    }
    let losses: Vec<Tensor> = (0..b)
        .map(|i| image_loss(&out.logits.get(i)?, &out.boxes.get(i)?, targets[i], cfg))
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&losses, 0)?)
}

/// Decode the `i`-th image: best category per query, boxes in pixels,
/// dropping scores below `threshold`.
pub fn decode(
    out: &DetectionOutput,
    i: usize,
    height: usize,
    width: usize,
    threshold: f32,
) -> Result<Vec<ScoredBox>> {
    let probs = candle_nn::ops::sigmoid(&out.logits.get(i)?)?;
    let scores = probs
        .max(D::Minus1)?
        .to_dtype(DType::F32)?
        .to_vec1::<f32>()?;
    let cats = probs.argmax(D::Minus1)?.to_vec1::<u32>()?;
    let boxes = out.boxes.get(i)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let (h, w) = (height as f32, width as f32);
    let mut res = Vec::new();
    for q in 0..scores.len() {
        if scores[q] < threshold {
            continue;
        }
        let [cx, cy, bw, bh] = [boxes[q][0], boxes[q][1], boxes[q][2], boxes[q][3]];
        let bbox = BoxAnnotation {
            category: cats[q] as usize,
            x1: ((cx - bw / 2.0) * w).clamp(0.0, w),
            y1: ((cy - bh / 2.0) * h).clamp(0.0, h),
            x2: ((cx + bw / 2.0) * w).clamp(0.0, w),
            y2: ((cy + bh / 2.0) * h).clamp(0.0, h),
        };
        if bbox.x2 > bbox.x1 && bbox.y2 > bbox.y1 {
            res.push(ScoredBox {
                bbox,
                score: scores[q],
            });
        }
    }
    res.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use candle_core::Device;

    #[test]
    fn query_count_and_zero_features() {
        let s = ParamStore::new(2, DType::F32);
        let head = DetectionHead::new(&s.root(), 16, 2, 32, 2, 20, 9).unwrap();
        let mem = Tensor::zeros((2, 30, 16), DType::F32, &Device::Cpu).unwrap();
        let pos = Tensor::zeros((1, 30, 16), DType::F32, &Device::Cpu).unwrap();
        let out = head.forward(&mem, &pos).unwrap();
        assert_eq!(out.logits.dims(), &[2, 20, 9]);
        assert_eq!(out.boxes.dims(), &[2, 20, 4]);
        let b = out.boxes.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(b.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn near_perfect_query_is_matched() {
        let target = DetTarget {
            labels: vec![3],
            boxes: vec![[0.4, 0.5, 0.2, 0.3]],
        };
        let mut logits = vec![vec![-3.0; 9]; 20];
        let mut boxes: Vec<Vec<f64>> = (0..20)
            .map(|q| vec![0.05 * q as f64, 0.9, 0.1, 0.1])
            .collect();
        logits[11][3] = 4.0;
        boxes[11] = vec![0.41, 0.5, 0.2, 0.29];
        let cfg = MatcherConfig::default();
        let m = match_queries(&logits, &boxes, &target, &cfg);
        // exhaustive oracle: with one target, the best assignment is the argmin column
        let cost = matching_cost(&logits, &boxes, &target, &cfg);
        let best = (0..20)
            .min_by(|&a, &b| cost[a].total_cmp(&cost[b]))
            .unwrap();
        assert_eq!(m, vec![(best, 0)]);
        assert_eq!(best, 11);
    }

    #[test]
    fn giou_values() {
        let a = [0.5, 0.5, 0.2, 0.2];
        assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        let far = [0.1, 0.1, 0.1, 0.1];
        assert!(giou(&a, &far) < 0.0);
        let ta = Tensor::new(&[a], &Device::Cpu).unwrap();
        let tf = Tensor::new(&[far], &Device::Cpu).unwrap();
        let g = tensor_giou(&ta, &tf)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0];
        assert!((g - giou(&a, &far)).abs() < 1e-6);
    }

    #[test]
    fn focal_matches_scalar_formula() {
        let x = Tensor::new(&[[0.3f64, -1.2], [2.0, 0.0]], &Device::Cpu).unwrap();
        let t = Tensor::new(&[[1f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let got = focal_loss_sum(&x, &t, 0.25, 2.0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let mut want = 0.0;
        for (xv, tv) in [(0.3, 1.0), (-1.2, 0.0), (2.0, 0.0), (0.0, 1.0)] {
            let p = sigmoid(xv);
            let ce = -(tv * p.ln() + (1.0 - tv) * (1.0 - p).ln());
            let pt = p * tv + (1.0 - p) * (1.0 - tv);
            let at = 0.25 * tv + 0.75 * (1.0 - tv);
            want += at * (1.0 - pt).powi(2) * ce;
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn decode_thresholds() {
        let logits = Tensor::new(&[[[3.0f32, -5.0], [-5.0, -4.0]]], &Device::Cpu).unwrap();
        let boxes = Tensor::new(
            &[[[0.5f32, 0.5, 0.5, 0.5], [0.2, 0.2, 0.1, 0.1]]],
            &Device::Cpu,
        )
        .unwrap();
        let out = DetectionOutput { logits, boxes };
        let d = decode(&out, 0, 64, 128, 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(
            d[0].bbox,
            BoxAnnotation {
                category: 0,
                x1: 32.0,
                y1: 16.0,
                x2: 96.0,
                y2: 48.0
            }
        );
        assert!(decode(&out, 0, 64, 128, 1.01).unwrap().is_empty());
    }
}
