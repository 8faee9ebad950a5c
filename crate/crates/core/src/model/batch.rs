//! Stacking samples into a training batch.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::data::io::mask_for;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::detection::DetTarget;
use crate::tasks::{PerTask, TaskKind, TaskSet};

#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(B, 3, H, W)`
    pub images: Tensor,
    /// Tasks each row carries labels for.
    pub labeled: Vec<TaskSet>,
    pub det_targets: Vec<Option<DetTarget>>,
    pub masks: PerTask<Vec<Option<Array2<u8>>>>,
    pub height: usize,
    pub width: usize,
}

/// `(B, 3, H, W)` tensor from `H×W×3` sample images.
pub fn image_tensor(samples: &[&Sample], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w, _) = samples
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?
        .image
        .dim();
    let mut v = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.image.dim() != (h, w, 3) {
            return Err(Error::Shape(format!(
                "sample {} is {:?}, batch is {h}×{w}",
                s.id,
                s.image.dim()
            )));
        }
        let chw = s.image.view().permuted_axes([2, 0, 1]);
        v.extend(chw.iter().copied());
    }
    Ok(Tensor::from_vec(v, (samples.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

impl Batch {
    /// A row counts as labeled for a task when the sample's tags include it
    /// and the matching annotation is loaded.
    pub fn from_samples(samples: &[&Sample], dtype: DType, device: &Device) -> Result<Self> {
        let images = image_tensor(samples, dtype, device)?;
        let (_, _, height, width) = images.dims4()?;
        let mut labeled = Vec::with_capacity(samples.len());
        let mut det_targets = Vec::with_capacity(samples.len());
        let mut masks = PerTask::<Vec<Option<Array2<u8>>>>::default();
        for s in samples {
            let mut tags = TaskSet::EMPTY;
            if s.split_tags.contains(TaskKind::Det) {
                tags.insert(TaskKind::Det);
                det_targets.push(Some(DetTarget::from_boxes(
                    &s.annotations.boxes,
                    height,
                    width,
                )));
            } else {
                det_targets.push(None);
            }
            for t in TaskKind::ALL.into_iter().filter(|t| t.is_pixel_task()) {
                let m = if s.split_tags.contains(t) {
                    mask_for(&s.annotations, t).cloned()
                } else {
                    None
                };
                if m.is_some() {
                    tags.insert(t);
                }
                masks[t].push(m);
            }
            labeled.push(tags);
        }
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images,
            labeled,
            det_targets,
            masks,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Labeled rows per task, restricted to `tasks`.
    pub fn rows(&self, tasks: TaskSet) -> PerTask<Vec<usize>> {
        let mut rows = PerTask::<Vec<usize>>::default();
        for (i, l) in self.labeled.iter().enumerate() {
            for t in l.intersection(tasks).iter() {
                rows[t].push(i);
            }
        }
        rows
    }

    /// Label maps `(n, H, W)` for the given rows of a pixel task.
    pub fn labels(&self, task: TaskKind, rows: &[usize]) -> Result<Tensor> {
        let mut v = Vec::with_capacity(rows.len() * self.height * self.width);
        for &r in rows {
            let m = self.masks[task]
                .get(r)
                .and_then(|m| m.as_ref())
                .ok_or_else(|| Error::Invalid(format!("row {r} has no {task} mask")))?;
            v.extend(m.iter().map(|&x| x as u32));
        }
        Ok(Tensor::from_vec(
            v,
            (rows.len(), self.height, self.width),
            self.images.device(),
        )?)
    }
}
