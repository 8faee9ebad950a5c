//! Mask metrics accumulated over a whole evaluation set.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// K×K confusion matrix, rows = ground truth, cols = prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: Array2::zeros((k, k)),
        }
    }

    pub fn add(&mut self, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::Invalid(format!(
                    "label {} outside [0,{})",
                    p.max(g),
                    self.k
                )));
            }
            self.counts[[g, p]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    /// Per-category IoU; `None` for categories absent from both prediction
    /// and ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.counts[[c, c]];
                let gt: u64 = self.counts.row(c).sum();
                let pred: u64 = self.counts.column(c).sum();
                let union = gt + pred - tp;
                if union == 0 {
                    return None;
                }
                Some(tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU in percent over categories present in prediction or ground truth.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        100.0 * present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn compute_miou(pred: ArrayView2<u8>, gt: ArrayView2<u8>, k: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt)?;
    Ok(cm.miou())
}

/// Foreground (label 1) IoU accumulator for binary lane masks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LaneIou {
    inter: u64,
    union: u64,
}

impl LaneIou {
    pub fn add(&mut self, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p != 0, g != 0);
            self.inter += (p && g) as u64;
            self.union += (p || g) as u64;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &LaneIou) {
        self.inter += other.inter;
        self.union += other.union;
    }

    /// Percent IoU. Two empty masks agree perfectly and score 100.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            100.0
        } else {
            100.0 * self.inter as f64 / self.union as f64
        }
    }
}

pub fn compute_lane_iou(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64> {
    let mut acc = LaneIou::default();
    acc.add(pred, gt)?;
    Ok(acc.iou())
}
