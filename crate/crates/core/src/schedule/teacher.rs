//! Single-task teachers trained on the real labels of one task.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::DType;

use crate::data::{DiskDataset, Sample, SplitManifest};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::batch::Batch;
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{ModelConfig, MultiTaskModel, ParamStore};
use crate::prompting::PromptConfig;
use crate::schedule::scheduler::ScheduleConfig;
use crate::tasks::{PerTask, TaskKind, TaskSet};
use crate::train::{DataPool, TrainConfig, Trainer};

pub const DEFAULT_DET_THRESHOLD: f32 = 0.5;

/// A trained single-task checkpoint and the score threshold for its
/// pseudo boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub task: TaskKind,
    pub checkpoint: PathBuf,
    pub threshold: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherBundle(pub PerTask<Option<Teacher>>);

impl TeacherBundle {
    pub fn insert(&mut self, t: Teacher) {
        let task = t.task;
        self.0[task] = Some(t);
    }

    pub fn covers(&self) -> TaskSet {
        TaskKind::ALL
            .into_iter()
            .filter(|&t| self.0[t].is_some())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TeacherReport {
    pub teacher: Teacher,
    /// Every sample id the training loop read.
    pub accessed: BTreeSet<String>,
    pub start_loss: f64,
    pub end_loss: f64,
    /// Headline score on the validation samples.
    pub val_metric: f64,
}

fn mean_loss(
    trainer: &Trainer,
    samples: &[Sample],
    task: TaskKind,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = Batch::from_samples(chunk, trainer.model.store().dtype(), &trainer.device())?;
        let v = trainer.losses(&batch, TaskSet::single(task))?.values()?;
        if let Some(l) = v[task] {
            total += l * chunk.len() as f64;
            n += chunk.len();
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Train a one-head model on the samples that carry real `task` labels and
/// write it to `out`. The validation score is computed on `val`, or on the
/// training subset when `val` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn train_teacher(
    task: TaskKind,
    ds: &DiskDataset,
    manifest: &SplitManifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    threshold: f32,
    config_hash: &str,
    val: Option<&[Sample]>,
    out: &Path,
) -> Result<TeacherReport> {
    let pool = DataPool::load(ds, manifest, TaskSet::single(task), false)?;
    if pool.is_empty() {
        return Err(Error::Invalid(format!(
            "no samples with real {task} labels to train a teacher on"
        )));
    }
    let store = ParamStore::new(seed, DType::F32);
    let model = MultiTaskModel::new(
        model_cfg.clone(),
        PromptConfig::disabled(),
        TaskSet::single(task),
        store,
    )?;
    let mut cfg = train_cfg.clone();
    cfg.schedule = ScheduleConfig::Joint;
    cfg.use_pseudo = false;
    let steps = cfg.total_steps(pool.len());
    let mut trainer = Trainer::new(model, cfg, pool.len(), seed)?;
    let bs = trainer.cfg.batch_size;
    let start_loss = mean_loss(&trainer, pool.samples(), task, bs)?;
    let mut accessed = BTreeSet::new();
    for _ in 0..steps {
        let rec = trainer.train_step(&pool)?;
        accessed.extend(rec.batch_ids);
    }
    let end_loss = mean_loss(&trainer, pool.samples(), task, bs)?;
    let refs: Vec<&Sample> = val.unwrap_or(pool.samples()).iter().collect();
    let val_metric = evaluate(&trainer.model, &refs, bs)?
        .get(task)
        .unwrap_or(0.0);

    let mut meta = CheckpointMeta {
        config_hash: config_hash.to_string(),
        step: 0,
        seed,
        task: Some(task.name().to_string()),
        manifest_hash: Some(manifest.hash()?),
        extra: Default::default(),
    };
    meta.extra
        .insert("model".into(), serde_json::to_value(model_cfg)?);
    meta.extra
        .insert("threshold".into(), serde_json::json!(threshold));
    meta.extra
        .insert("val_metric".into(), serde_json::json!(val_metric));
    meta.extra
        .insert("start_loss".into(), serde_json::json!(start_loss));
    meta.extra
        .insert("end_loss".into(), serde_json::json!(end_loss));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    trainer.save(out, meta)?;
    Ok(TeacherReport {
        teacher: Teacher {
            task,
            checkpoint: out.to_path_buf(),
            threshold,
        },
        accessed,
        start_loss,
        end_loss,
        val_metric,
    })
}

/// Rebuild a teacher's model from its checkpoint.
pub fn load_teacher(path: &Path) -> Result<(MultiTaskModel, Teacher, CheckpointMeta)> {
    let ck = checkpoint::load(path)?;
    let meta = ck.meta.clone();
    let task: TaskKind = meta
        .task
        .as_deref()
        .ok_or_else(|| Error::Invalid(format!("{} is not a teacher checkpoint", path.display())))?
        .parse()?;
    let model_cfg: ModelConfig = match meta.extra.get("model") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => {
            return Err(Error::Invalid(format!(
                "{} lacks a model config",
                path.display()
            )))
        }
    };
    let threshold = meta
        .extra
        .get("threshold")
        .and_then(|v| v.as_f64())
        .unwrap_or(DEFAULT_DET_THRESHOLD as f64) as f32;
    let store = ParamStore::new(meta.seed, DType::F32);
    let model = MultiTaskModel::new(
        model_cfg,
        PromptConfig::disabled(),
        TaskSet::single(task),
        store,
    )?;
    ck.restore_params(model.store())?;
    Ok((
        model,
        Teacher {
            task,
            checkpoint: path.to_path_buf(),
            threshold,
        },
        meta,
    ))
}
