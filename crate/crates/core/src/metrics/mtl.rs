//! Multi-task summaries: per-task metric vectors, their average, and the
//! mean relative improvement over single-task baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{PerTask, TaskKind, NUM_TASKS};

/// Main score per task in percent, ordered det (mAP), sem (mIoU), driv
/// (mIoU), lane (IoU).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector(pub [f64; NUM_TASKS]);

impl MetricVector {
    pub fn new(det: f64, sem: f64, driv: f64, lane: f64) -> Self {
        MetricVector([det, sem, driv, lane])
    }

    pub fn get(&self, t: TaskKind) -> f64 {
        self.0[t.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite metric in {:?}", self.0)));
        }
        Ok(())
    }
}

impl From<PerTask<f64>> for MetricVector {
    fn from(p: PerTask<f64>) -> Self {
        MetricVector(p.0)
    }
}

/// Mean relative per-task change, in percent:
/// `100/T · Σ (m_i − b_i) / b_i`.
pub fn delta_mtl(model: &[f64], baseline: &[f64]) -> Result<f64> {
    if model.len() != baseline.len() || model.is_empty() {
        return Err(Error::Shape(format!(
            "metric vectors of length {} and {}",
            model.len(),
            baseline.len()
        )));
    }
    if let Some(i) = baseline.iter().position(|&b| b == 0.0) {
        return Err(Error::Invalid(format!("baseline entry {i} is zero")));
    }
    let sum: f64 = model.iter().zip(baseline).map(|(m, b)| (m - b) / b).sum();
    Ok(100.0 * sum / model.len() as f64)
}

pub fn average_score(m: &[f64]) -> f64 {
    m.iter().sum::<f64>() / m.len() as f64
}

/// Round half away from zero at `decimals`, tolerant of binary
/// representation error (49.25 stored as 49.2499999… still rounds up).
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = x.abs() * scale;
    let r = (scaled + 0.5 + 1e-9).floor();
    x.signum() * r / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_anchor_values() {
        let full = delta_mtl(&[39.2, 63.2, 89.4, 24.0], &[36.5, 59.8, 89.1, 25.9]).unwrap();
        assert_eq!(round_half_up(full, 2), 1.52);
        let balance = delta_mtl(&[33.9, 61.2, 87.4, 22.2], &[28.1, 59.8, 85.5, 23.7]).unwrap();
        assert_eq!(round_half_up(balance, 2), 4.72);
        assert_eq!(
            round_half_up(average_score(&[34.2, 62.2, 88.3, 23.3]), 1),
            52.0
        );
        let avg = average_score(&[39.2, 63.2, 89.4, 24.0]);
        assert!((avg - 53.95).abs() < 1e-12);
        assert_eq!(round_half_up(avg, 1), 54.0);
    }

    #[test]
    fn identical_vectors_zero_delta() {
        let v = [10.0, 20.0, 30.0, 40.0];
        assert_eq!(delta_mtl(&v, &v).unwrap(), 0.0);
        assert_eq!(average_score(&[7.5; 4]), 7.5);
    }

    #[test]
    fn zero_baseline_rejected() {
        assert!(delta_mtl(&[1.0, 2.0], &[1.0, 0.0]).is_err());
        assert!(delta_mtl(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(49.25, 1), 49.3);
        assert_eq!(round_half_up(46.65, 1), 46.7);
        assert_eq!(round_half_up(-1.645, 2), -1.65);
        assert_eq!(round_half_up(0.0, 2), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn delta_is_linear_and_monotone(
            m in proptest::array::uniform4(1.0f64..100.0),
            b in proptest::array::uniform4(1.0f64..100.0),
            i in 0usize..4,
            bump in 0.01f64..10.0,
        ) {
            let d0 = delta_mtl(&m, &b).unwrap();
            let mut m2 = m;
            m2[i] += bump;
            let d1 = delta_mtl(&m2, &b).unwrap();
            proptest::prop_assert!(d1 > d0);
            let expected = 100.0 * bump / b[i] / 4.0;
            proptest::prop_assert!((d1 - d0 - expected).abs() < 1e-9 * (1.0 + expected.abs()));
        }
    }
}
