//! Filling missing annotations with teacher predictions.

use crate::data::{Annotations, DiskDataset, Sample};
use crate::error::{Error, Result};
use crate::eval::predict;
use crate::schedule::teacher::{load_teacher, TeacherBundle};
use crate::tasks::{PerTask, TaskKind, TaskSet};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoReport {
    /// Pseudo annotations written per task.
    pub written: PerTask<usize>,
    /// Pseudo boxes kept after thresholding.
    pub boxes: usize,
}

/// Label every (sample, task) pair that lacks a real annotation using the
/// task's teacher, then flag those pairs in the manifest. Real labels are
/// never touched; running twice yields the same files.
pub fn pseudo_label_dataset(
    ds: &DiskDataset,
    teachers: &TeacherBundle,
    batch_size: usize,
) -> Result<PseudoReport> {
    let mut manifest = ds.manifest()?;
    let gaps = manifest.gapped_tasks();
    if let Some(t) = gaps.iter().find(|&t| teachers.0[t].is_none()) {
        return Err(Error::MissingTeacher(t));
    }
    let mut loaded = Vec::new();
    for t in gaps.iter() {
        let teacher = teachers.0[t].as_ref().expect("checked above");
        let (model, _, _) = load_teacher(&teacher.checkpoint)?;
        if model.heads() != TaskSet::single(t) {
            return Err(Error::Invalid(format!(
                "{} is not a {t} teacher",
                teacher.checkpoint.display()
            )));
        }
        loaded.push((t, model, teacher.threshold));
    }

    let mut report = PseudoReport::default();
    for (t, model, threshold) in &loaded {
        let t = *t;
        let todo: Vec<usize> = (0..manifest.entries.len())
            .filter(|&i| !manifest.entries[i].tasks.contains(t))
            .collect();
        for chunk in todo.chunks(batch_size.max(1)) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let id = &manifest.entries[i].id;
                    Ok(Sample {
                        id: id.clone(),
                        image: ds.read_image(id)?,
                        annotations: Annotations::default(),
                        split_tags: TaskSet::EMPTY,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let preds = predict(model, &refs, batch_size, *threshold)?;
            for ((&i, s), p) in chunk.iter().zip(&samples).zip(preds) {
                let mut a = Annotations::default();
                match t {
                    TaskKind::Det => {
                        a.boxes = p
                            .boxes
                            .unwrap_or_default()
                            .into_iter()
                            .map(|b| b.bbox)
                            .collect();
                        report.boxes += a.boxes.len();
                    }
                    TaskKind::Sem => a.sem_mask = p.masks[t].clone(),
                    TaskKind::Driv => a.driv_mask = p.masks[t].clone(),
                    TaskKind::Lane => a.lane_mask = p.masks[t].clone(),
                }
                ds.write_annotations(&s.id, &a, TaskSet::single(t), true)?;
                manifest.entries[i].pseudo.insert(t);
                report.written[t] += 1;
            }
        }
    }
    crate::data::write_manifest(&manifest, &ds.manifest_path())?;
    Ok(report)
}
