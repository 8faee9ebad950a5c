//! Inference over sample sets and metric accumulation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::io::mask_for;
use crate::data::{Sample, ScoredBox};
use crate::error::Result;
use crate::metrics::{ConfusionMatrix, LaneIou, MapAccumulator, MapResult};
use crate::model::batch::image_tensor;
use crate::model::{detection, segmentation, MultiTaskModel};
use crate::tasks::{PerTask, TaskKind, TaskSet};

/// Per-image outputs of every head the model has.
#[derive(Debug, Clone, Default)]
pub struct Prediction {
    pub boxes: Option<Vec<ScoredBox>>,
    pub masks: PerTask<Option<Array2<u8>>>,
}

/// Run all heads over `samples` in chunks of `batch_size`. Detections below
/// `det_threshold` are dropped.
pub fn predict(
    model: &MultiTaskModel,
    samples: &[&Sample],
    batch_size: usize,
    det_threshold: f32,
) -> Result<Vec<Prediction>> {
    let store = model.store();
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images = image_tensor(chunk, store.dtype(), &store.device())?;
        let (_, _, h, w) = images.dims4()?;
        let out = model.forward_all(&images)?;
        for i in 0..chunk.len() {
            let mut p = Prediction::default();
            if let Some(d) = &out.det {
                p.boxes = Some(detection::decode(&d.out, i, h, w, det_threshold)?);
            }
            preds.push(p);
        }
        for t in TaskKind::ALL.into_iter().filter(|t| t.is_pixel_task()) {
            if let Some(s) = &out.seg[t] {
                let maps = segmentation::argmax_labels(&s.out.detach())?;
                let base = preds.len() - chunk.len();
                for (i, m) in maps.into_iter().enumerate() {
                    preds[base + i].masks[t] = Some(m);
                }
            }
        }
    }
    Ok(preds)
}

/// Scores on the 0–100 scale, `None` for tasks without a head or labels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskScores {
    pub map: Option<(f64, f64, f64)>,
    pub miou_sem: Option<f64>,
    pub miou_driv: Option<f64>,
    pub iou_lane: Option<f64>,
}

impl TaskScores {
    /// Headline score of one task.
    pub fn get(&self, t: TaskKind) -> Option<f64> {
        match t {
            TaskKind::Det => self.map.map(|m| m.0),
            TaskKind::Sem => self.miou_sem,
            TaskKind::Driv => self.miou_driv,
            TaskKind::Lane => self.iou_lane,
        }
    }
}

/// Evaluate every head against the labels each sample carries.
pub fn evaluate(
    model: &MultiTaskModel,
    samples: &[&Sample],
    batch_size: usize,
) -> Result<TaskScores> {
    let preds = predict(model, samples, batch_size, 0.0)?;
    let heads = model.heads();
    let mut map = MapAccumulator::new(TaskKind::Det.num_categories());
    let mut cms: PerTask<Option<ConfusionMatrix>> = PerTask::default();
    cms[TaskKind::Sem] = Some(ConfusionMatrix::new(TaskKind::Sem.num_categories()));
    cms[TaskKind::Driv] = Some(ConfusionMatrix::new(TaskKind::Driv.num_categories()));
    let mut lane = LaneIou::default();
    let mut seen = TaskSet::EMPTY;
    for (s, p) in samples.iter().zip(&preds) {
        if let Some(b) = &p.boxes {
            if s.split_tags.contains(TaskKind::Det) {
                map.add_image(b, &s.annotations.boxes);
                seen.insert(TaskKind::Det);
            }
        }
        for t in [TaskKind::Sem, TaskKind::Driv, TaskKind::Lane] {
            let (Some(pm), Some(gt)) = (&p.masks[t], mask_for(&s.annotations, t)) else {
                continue;
            };
            if !s.split_tags.contains(t) {
                continue;
            }
            seen.insert(t);
            match t {
                TaskKind::Lane => lane.add(pm.view(), gt.view())?,
                _ => cms[t]
                    .as_mut()
                    .expect("matrix per pixel task")
                    .add(pm.view(), gt.view())?,
            }
        }
    }
    let has = |t| heads.contains(t) && seen.contains(t);
    Ok(TaskScores {
        map: has(TaskKind::Det).then(|| {
            let MapResult { map, ap50, ap75 } = map.finish();
            (map, ap50, ap75)
        }),
        miou_sem: has(TaskKind::Sem).then(|| cms[TaskKind::Sem].as_ref().unwrap().miou()),
        miou_driv: has(TaskKind::Driv).then(|| cms[TaskKind::Driv].as_ref().unwrap().miou()),
        iou_lane: has(TaskKind::Lane).then(|| lane.iou()),
    })
}
