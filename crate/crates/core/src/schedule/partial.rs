//! Zeroing losses for missing labels.

use candle_core::Tensor;

use crate::data::SplitManifest;
use crate::error::{Error, Result};
use crate::tasks::{PerTask, TaskKind, TaskSet};

/// Per-sample availability: real labels, plus pseudo labels when enabled.
pub fn zeroed_loss_mask(
    ids: &[String],
    manifest: &SplitManifest,
    use_pseudo: bool,
) -> Result<Vec<TaskSet>> {
    ids.iter()
        .map(|id| {
            manifest
                .get(id)
                .map(|e| e.available(use_pseudo))
                .ok_or_else(|| Error::UnknownSample(id.clone()))
        })
        .collect()
}

/// Rows carrying each task's labels.
pub fn task_rows(mask: &[TaskSet]) -> PerTask<Vec<usize>> {
    let mut rows = PerTask::<Vec<usize>>::default();
    for (i, m) in mask.iter().enumerate() {
        for t in m.iter() {
            rows[t].push(i);
        }
    }
    rows
}

/// Mean of `per_sample` over the rows where `task` is available; `None` when
/// no row has it. The denominator is the labeled count, not the batch size.
pub fn masked_mean(
    per_sample: &Tensor,
    mask: &[TaskSet],
    task: TaskKind,
) -> Result<Option<Tensor>> {
    if per_sample.dims() != [mask.len()] {
        return Err(Error::Shape(format!(
            "{:?} losses for {} samples",
            per_sample.dims(),
            mask.len()
        )));
    }
    let w: Vec<f64> = mask
        .iter()
        .map(|m| if m.contains(task) { 1.0 } else { 0.0 })
        .collect();
    let n: f64 = w.iter().sum();
    if n == 0.0 {
        return Ok(None);
    }
    let w = Tensor::new(w.as_slice(), per_sample.device())?.to_dtype(per_sample.dtype())?;
    Ok(Some(((per_sample * w)?.sum_all()? / n)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ManifestEntry, SplitSetting};
    use candle_core::Device;

    fn manifest() -> SplitManifest {
        let e = |id: &str, tasks: TaskSet, pseudo: TaskSet| ManifestEntry {
            id: id.into(),
            tasks,
            pseudo,
        };
        SplitManifest {
            setting: SplitSetting::DisjointBalance,
            sem_fraction: 0.1,
            entries: vec![
                e("a", TaskSet::single(TaskKind::Det), TaskSet::EMPTY),
                e(
                    "b",
                    TaskSet::single(TaskKind::Sem),
                    TaskSet::single(TaskKind::Det),
                ),
                e("c", TaskSet::FULL, TaskSet::EMPTY),
            ],
        }
    }

    #[test]
    fn masks_follow_manifest() {
        let m = manifest();
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let plain = zeroed_loss_mask(&ids, &m, false).unwrap();
        assert_eq!(plain[0], TaskSet::single(TaskKind::Det));
        assert_eq!(plain[2], TaskSet::FULL);
        let pseudo = zeroed_loss_mask(&ids, &m, true).unwrap();
        assert!(pseudo[1].contains(TaskKind::Det));
        assert!(matches!(
            zeroed_loss_mask(&["zz".into()], &m, false),
            Err(Error::UnknownSample(_))
        ));
        let rows = task_rows(&plain);
        assert_eq!(rows[TaskKind::Det], vec![0, 2]);
        assert_eq!(rows[TaskKind::Sem], vec![1, 2]);
        assert_eq!(rows[TaskKind::Lane], vec![2]);
    }

    #[test]
    fn denominator_is_labeled_count() {
        let m = manifest();
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mask = zeroed_loss_mask(&ids, &m, false).unwrap();
        let l = Tensor::new(&[1.0f64, 10.0, 4.0], &Device::Cpu).unwrap();
        let det = masked_mean(&l, &mask, TaskKind::Det)
            .unwrap()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(det, (1.0 + 4.0) / 2.0);
        let sem = masked_mean(&l, &mask, TaskKind::Sem)
            .unwrap()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(sem, (10.0 + 4.0) / 2.0);
        let lane = masked_mean(&l, &mask, TaskKind::Lane)
            .unwrap()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(lane, 4.0);
        let none = masked_mean(&l, &[TaskSet::EMPTY; 3], TaskKind::Det).unwrap();
        assert!(none.is_none());
    }
}
