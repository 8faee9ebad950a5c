//! COCO-style box mAP: IoU thresholds 0.50:0.05:0.95, 101-point interpolated
//! precision, averaged over categories that have ground truth.

use crate::data::synth::BoxAnnotation;
use crate::data::ScoredBox;
use crate::tasks::K_DET;

pub const NUM_IOU_THRESHOLDS: usize = 10;

pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

pub fn box_iou(a: &BoxAnnotation, b: &BoxAnnotation) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let inter = ix * iy;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One scored prediction after per-image matching: `tp[t]` tells whether it
/// matched a ground-truth box at threshold index `t`.
#[derive(Debug, Clone, Copy)]
struct MatchRecord {
    score: f32,
    tp: [bool; NUM_IOU_THRESHOLDS],
}

/// Accumulates per-image matches; merge is concatenation, so partial results
/// from parallel workers combine associatively.
#[derive(Debug, Clone)]
pub struct MapAccumulator {
    records: Vec<Vec<MatchRecord>>,
    num_gt: Vec<usize>,
}

impl Default for MapAccumulator {
    fn default() -> Self {
        Self::new(K_DET)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl MapAccumulator {
    pub fn new(num_categories: usize) -> Self {
        MapAccumulator {
            records: vec![Vec::new(); num_categories],
            num_gt: vec![0; num_categories],
        }
    }

    /// Match one image's predictions against its ground truth.
    pub fn add_image(&mut self, predictions: &[ScoredBox], ground_truth: &[BoxAnnotation]) {
        let thresholds = iou_thresholds();
        for (cat, records) in self.records.iter_mut().enumerate() {
            let gts: Vec<&BoxAnnotation> =
                ground_truth.iter().filter(|g| g.category == cat).collect();
            self.num_gt[cat] += gts.len();
            let mut preds: Vec<&ScoredBox> = predictions
                .iter()
                .filter(|p| p.bbox.category == cat)
                .collect();
            preds.sort_by(|a, b| b.score.total_cmp(&a.score));
            let ious: Vec<Vec<f64>> = preds
                .iter()
                .map(|p| gts.iter().map(|g| box_iou(&p.bbox, g)).collect())
                .collect();
            let mut tps = vec![[false; NUM_IOU_THRESHOLDS]; preds.len()];
            for (ti, &thr) in thresholds.iter().enumerate() {
                let mut taken = vec![false; gts.len()];
                for (pi, row) in ious.iter().enumerate() {
                    let mut best: Option<usize> = None;
                    let mut best_iou = thr;
                    for (gi, &iou) in row.iter().enumerate() {
                        if taken[gi] || iou < best_iou {
                            continue;
                        }
                        best_iou = iou;
                        best = Some(gi);
                    }
                    if let Some(gi) = best {
                        taken[gi] = true;
                        tps[pi][ti] = true;
                    }
                }
            }
            records.extend(
                preds
                    .iter()
                    .zip(tps)
                    .map(|(p, tp)| MatchRecord { score: p.score, tp }),
            );
        }
    }

    pub fn merge(&mut self, other: MapAccumulator) {
        for (a, b) in self.records.iter_mut().zip(other.records) {
            a.extend(b);
        }
        for (a, b) in self.num_gt.iter_mut().zip(other.num_gt) {
            *a += b;
        }
    }

    /// AP per (category, threshold); `None` where the category has no GT.
    pub fn ap_table(&self) -> Vec<Option<[f64; NUM_IOU_THRESHOLDS]>> {
        self.records
            .iter()
            .zip(&self.num_gt)
            .map(|(recs, &n_gt)| {
                if n_gt == 0 {
                    return None;
                }
                let mut recs = recs.clone();
                recs.sort_by(|a, b| b.score.total_cmp(&a.score));
                Some(std::array::from_fn(|t| {
                    let flags: Vec<bool> = recs.iter().map(|r| r.tp[t]).collect();
                    interpolated_ap(&flags, n_gt)
                }))
            })
            .collect()
    }

    /// Percent scores. With no ground truth at all every score is 0.
    pub fn finish(&self) -> MapResult {
        let table: Vec<[f64; NUM_IOU_THRESHOLDS]> = self.ap_table().into_iter().flatten().collect();
        if table.is_empty() {
            return MapResult {
                map: 0.0,
                ap50: 0.0,
                ap75: 0.0,
            };
        }
        let n = table.len() as f64;
        let mean_at = |t: usize| table.iter().map(|r| r[t]).sum::<f64>() / n;
        let map = (0..NUM_IOU_THRESHOLDS).map(mean_at).sum::<f64>() / NUM_IOU_THRESHOLDS as f64;
        MapResult {
            map: 100.0 * map,
            ap50: 100.0 * mean_at(0),
            ap75: 100.0 * mean_at(5),
        }
    }
}

/// 101-point interpolated AP for a score-sorted list of TP flags.
fn interpolated_ap(tp_sorted: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp_sorted.len());
    let mut recall = Vec::with_capacity(tp_sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in tp_sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// mAP over a whole evaluation set given per-image predictions and GT.
pub fn compute_map(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[Vec<BoxAnnotation>],
) -> MapResult {
    let mut acc = MapAccumulator::default();
    for (p, g) in predictions.iter().zip(ground_truth) {
        acc.add_image(p, g);
    }
    acc.finish()
}
