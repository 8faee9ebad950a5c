//! Experiment orchestration behind the `uniperc` command line.

pub mod config;
pub mod plot;

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::io::load_with_entry;
use crate::data::split::build_split_for_ids;
use crate::data::{
    generate_scene, write_manifest, DiskDataset, Sample, SplitManifest, SplitSetting,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, TaskScores};
use crate::metrics::tables::{check_tables, Baseline, PublishedTables, RowCheck};
use crate::metrics::{emit_report, EvalReport, MetricVector, ReportFormat};
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{MultiTaskModel, ParamStore};
use crate::prompting::{
    audit_leakage, build_prompt_bank, EncoderBackend, ExemplarEncoder, PromptBank, StubEncoder,
};
use crate::schedule::{
    load_teacher, pseudo_label_dataset, train_teacher, PseudoReport, TeacherBundle, TeacherReport,
};
use crate::tasks::{TaskKind, TaskSet};
use crate::train::{DataPool, StepRecord, Trainer};
use crate::util::stream_rng;

pub use config::{DataConfig, EvalConfig, ExperimentConfig, Preset, TeacherConfig};

const STAMP: &str = "stamp.json";

/// Provenance written beside every generated artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    /// Hash of the config section the artifact depends on.
    pub input_hash: String,
}

fn write_stamp(dir: &Path, cfg: &ExperimentConfig, input_hash: String) -> Result<()> {
    let s = Stamp {
        config_hash: cfg.hash(),
        input_hash,
    };
    std::fs::write(dir.join(STAMP), serde_json::to_vec_pretty(&s)?)?;
    Ok(())
}

fn check_stamp(dir: &Path, expected: &str, what: &str) -> Result<()> {
    let s: Stamp = serde_json::from_slice(&std::fs::read(dir.join(STAMP)).map_err(|e| {
        Error::Config(format!(
            "{what} at {} is missing its stamp ({e}); regenerate it",
            dir.display()
        ))
    })?)?;
    if s.input_hash != expected {
        return Err(Error::HashMismatch {
            checkpoint: s.input_hash,
            config: expected.to_string(),
        });
    }
    Ok(())
}

fn derived_seed(seed: u64, stream: &str, index: u64) -> u64 {
    stream_rng(seed, stream, index).next_u64()
}

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub train_manifest_hash: String,
    pub eval_manifest_hash: String,
    pub contact_sheet: PathBuf,
}

fn generate_into(
    dir: &Path,
    ids: &[String],
    seeds: &[u64],
    cfg: &ExperimentConfig,
    manifest: &SplitManifest,
) -> Result<()> {
    let ds = DiskDataset::create(dir)?;
    for (id, &s) in ids.iter().zip(seeds) {
        let mut sample = generate_scene(s, &cfg.data.scene)?;
        sample.id = id.clone();
        sample.split_tags = manifest.get(id).expect("manifest covers ids").tasks;
        ds.write_sample(&sample)?;
    }
    write_manifest(manifest, &ds.manifest_path())?;
    write_stamp(dir, cfg, cfg.data_hash())
}

/// Generate the training set (with the configured split) and a fully
/// labeled evaluation set from disjoint seeds.
pub fn gen_data(cfg: &ExperimentConfig, force: bool) -> Result<GenDataOutput> {
    let root = cfg.out_dir.join("data");
    if root.exists() && std::fs::read_dir(&root)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                root.display()
            )));
        }
        std::fs::remove_dir_all(&root)?;
    }
    let d = &cfg.data;
    let train_ids: Vec<String> = (0..d.train_samples)
        .map(|i| format!("train_{i:06}"))
        .collect();
    let train_seeds: Vec<u64> = (0..d.train_samples as u64)
        .map(|i| derived_seed(cfg.seed, "scene-train", i))
        .collect();
    let split = build_split_for_ids(
        d.setting,
        &train_ids,
        derived_seed(cfg.seed, "split", 0),
        d.sem_fraction,
    )?;
    split.audit_disjoint()?;
    generate_into(&cfg.train_dir(), &train_ids, &train_seeds, cfg, &split)?;

    let eval_ids: Vec<String> = (0..d.eval_samples)
        .map(|i| format!("eval_{i:06}"))
        .collect();
    let eval_seeds: Vec<u64> = (0..d.eval_samples as u64)
        .map(|i| derived_seed(cfg.seed, "scene-eval", i))
        .collect();
    let eval_split = build_split_for_ids(SplitSetting::Full, &eval_ids, 0, 1.0)?;
    generate_into(&cfg.eval_dir(), &eval_ids, &eval_seeds, cfg, &eval_split)?;

    let ds = DiskDataset::open(&cfg.train_dir())?;
    let preview = split
        .entries
        .iter()
        .take(16)
        .map(|e| load_with_entry(&ds, e, e.tasks, false))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(cfg.plot_dir())?;
    let contact_sheet = cfg.plot_dir().join("contact_sheet.png");
    plot::contact_sheet(&preview, &contact_sheet)?;
    Ok(GenDataOutput {
        train_manifest_hash: split.hash()?,
        eval_manifest_hash: eval_split.hash()?,
        contact_sheet,
    })
}

fn open_train(
    cfg: &ExperimentConfig,
    allow_mismatch: bool,
) -> Result<(DiskDataset, SplitManifest)> {
    let dir = cfg.train_dir();
    if !allow_mismatch {
        check_stamp(&dir, &cfg.data_hash(), "training data")?;
    }
    let ds = DiskDataset::open(&dir)?;
    let m = ds.manifest()?;
    Ok((ds, m))
}

fn load_eval_samples(cfg: &ExperimentConfig, allow_mismatch: bool) -> Result<Vec<Sample>> {
    let dir = cfg.eval_dir();
    if !allow_mismatch {
        check_stamp(&dir, &cfg.data_hash(), "evaluation data")?;
    }
    let ds = DiskDataset::open(&dir)?;
    let m = ds.manifest()?;
    m.entries
        .iter()
        .map(|e| load_with_entry(&ds, e, e.tasks, false))
        .collect()
}

pub fn make_encoder(cfg: &ExperimentConfig) -> Result<Box<dyn ExemplarEncoder>> {
    match cfg.prompting.backend {
        EncoderBackend::Stub => Ok(Box::new(StubEncoder::new(cfg.prompting.seed))),
        #[cfg(feature = "clip")]
        EncoderBackend::Clip => Ok(Box::new(
            crate::prompting::encoder::ClipEncoder::from_cache()?,
        )),
        #[cfg(not(feature = "clip"))]
        EncoderBackend::Clip => Err(Error::Config(
            "the clip backend needs a build with `--features clip`".into(),
        )),
    }
}

/// Build one prompt bank per task from real-labeled training images.
pub fn build_prompts(cfg: &ExperimentConfig) -> Result<Vec<PromptBank>> {
    let (ds, manifest) = open_train(cfg, false)?;
    let samples: Vec<Sample> = manifest
        .entries
        .iter()
        .map(|e| load_with_entry(&ds, e, e.tasks, false))
        .collect::<Result<_>>()?;
    let train_ids: HashSet<String> = manifest.entries.iter().map(|e| e.id.clone()).collect();
    let encoder = make_encoder(cfg)?;
    let dir = cfg.prompt_dir();
    std::fs::create_dir_all(&dir)?;
    let mut banks = Vec::new();
    for t in TaskKind::ALL {
        let pool: Vec<&Sample> = samples
            .iter()
            .filter(|s| s.split_tags.contains(t))
            .collect();
        let seed = derived_seed(cfg.prompting.seed, "exemplars", t.index() as u64);
        let (bank, set) = build_prompt_bank(
            &pool,
            t,
            cfg.prompting.n[t.index()],
            cfg.prompting.alpha,
            seed,
            encoder.as_ref(),
        )?;
        audit_leakage(&set, &train_ids)?;
        bank.save(&dir)?;
        banks.push(bank);
    }
    write_stamp(&dir, cfg, cfg.prompt_hash())?;
    Ok(banks)
}

fn teacher_path(cfg: &ExperimentConfig, t: TaskKind) -> PathBuf {
    cfg.teacher_dir().join(format!("{t}.safetensors"))
}

/// Train teachers for `tasks`, or for every task with unlabeled samples.
pub fn train_teachers(
    cfg: &ExperimentConfig,
    tasks: Option<TaskSet>,
) -> Result<Vec<TeacherReport>> {
    let (ds, manifest) = open_train(cfg, false)?;
    let tasks = tasks.unwrap_or_else(|| manifest.gapped_tasks());
    let val = load_eval_samples(cfg, false)?;
    let train = cfg.teacher_train();
    let mut out = Vec::new();
    for t in tasks.iter() {
        let seed = derived_seed(cfg.seed, "teacher", t.index() as u64);
        let path = teacher_path(cfg, t);
        let r = train_teacher(
            t,
            &ds,
            &manifest,
            &cfg.model,
            &train,
            seed,
            cfg.teacher.det_threshold,
            &cfg.hash(),
            Some(&val),
            &path,
        )?;
        let access = cfg.teacher_dir().join(format!("{t}.access.json"));
        std::fs::write(access, serde_json::to_vec_pretty(&r.accessed)?)?;
        out.push(r);
    }
    Ok(out)
}

/// Fill every gap in the training manifest with teacher predictions.
pub fn pseudo_label(cfg: &ExperimentConfig) -> Result<PseudoReport> {
    let (ds, _) = open_train(cfg, false)?;
    let mut bundle = TeacherBundle::default();
    for t in TaskKind::ALL {
        let p = teacher_path(cfg, t);
        if p.exists() {
            let (_, teacher, _) = load_teacher(&p)?;
            bundle.insert(teacher);
        }
    }
    pseudo_label_dataset(&ds, &bundle, cfg.eval.batch_size)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogLine {
    pub config_hash: String,
    #[serde(flatten)]
    pub record: StepRecord,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_step: usize,
}

fn new_model(cfg: &ExperimentConfig) -> Result<MultiTaskModel> {
    let store = ParamStore::new(derived_seed(cfg.seed, "model-init", 0), DType::F32);
    MultiTaskModel::new(
        cfg.model.clone(),
        cfg.prompting.clone(),
        TaskSet::FULL,
        store,
    )
}

fn checkpoint_path(cfg: &ExperimentConfig, step: usize) -> PathBuf {
    cfg.checkpoint_dir()
        .join(format!("step_{step:06}.safetensors"))
}

/// Most recent multi-task checkpoint of the run, if any.
pub fn latest_checkpoint(cfg: &ExperimentConfig) -> Result<Option<PathBuf>> {
    let dir = cfg.checkpoint_dir();
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut all: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step_") && n.ends_with(".safetensors"))
        })
        .collect();
    all.sort();
    Ok(all.pop())
}

fn meta_for(cfg: &ExperimentConfig, manifest: &SplitManifest) -> Result<CheckpointMeta> {
    let mut meta = CheckpointMeta {
        config_hash: cfg.hash(),
        step: 0,
        seed: cfg.seed,
        task: None,
        manifest_hash: Some(manifest.hash()?),
        extra: Default::default(),
    };
    meta.extra
        .insert("config".into(), serde_json::to_value(cfg)?);
    Ok(meta)
}

/// Multi-task training with a JSON-lines log and periodic checkpoints.
/// With `resume`, training continues from the latest checkpoint and the
/// log is cut back to that step.
pub fn train(cfg: &ExperimentConfig, resume: bool) -> Result<TrainSummary> {
    let (ds, manifest) = open_train(cfg, false)?;
    let pool = DataPool::load(&ds, &manifest, TaskSet::FULL, cfg.train.use_pseudo)?;
    if pool.is_empty() {
        return Err(Error::Invalid("no labeled training samples".into()));
    }
    let model = new_model(cfg)?;
    if cfg.prompting.enabled {
        check_stamp(&cfg.prompt_dir(), &cfg.prompt_hash(), "prompt banks")?;
        model.load_prompts_from(&cfg.prompt_dir())?;
    }
    let mut trainer = Trainer::new(model, cfg.train.clone(), pool.len(), cfg.seed)?;
    std::fs::create_dir_all(cfg.checkpoint_dir())?;

    let log_path = cfg.log_path();
    let mut kept = Vec::new();
    if resume {
        if let Some(ck) = latest_checkpoint(cfg)? {
            let meta = checkpoint::read_meta(&ck)?;
            if meta.config_hash != cfg.hash() {
                return Err(Error::HashMismatch {
                    checkpoint: meta.config_hash,
                    config: cfg.hash(),
                });
            }
            trainer.resume(&ck)?;
            if log_path.exists() {
                for line in std::io::BufReader::new(std::fs::File::open(&log_path)?).lines() {
                    let line = line?;
                    let l: LogLine = serde_json::from_str(&line)?;
                    if l.record.step < trainer.step {
                        kept.push(line);
                    }
                }
            }
        }
    }
    let mut log = std::fs::File::create(&log_path)?;
    for line in &kept {
        writeln!(log, "{line}")?;
    }

    let total = cfg.train.total_steps(pool.len());
    let every = match cfg.train.checkpoint_every {
        0 => cfg.train.steps_per_epoch(pool.len()),
        n => n,
    };
    let base_meta = meta_for(cfg, &manifest)?;
    let hash = cfg.hash();
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.step < total {
        let rec = match trainer.train_step(&pool) {
            Ok(r) => r,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                if let Error::NonFiniteLoss { step, batch } = &e {
                    let dump = serde_json::json!({ "step": step, "batch_ids": batch, "config_hash": hash });
                    std::fs::write(
                        cfg.out_dir.join("nan_dump.json"),
                        serde_json::to_vec_pretty(&dump)?,
                    )?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(
            log,
            "{}",
            serde_json::to_string(&LogLine {
                config_hash: hash.clone(),
                record: rec.clone()
            })?
        )?;
        records.push(rec);
        if trainer.step % every == 0 || trainer.step == total {
            let p = checkpoint_path(cfg, trainer.step);
            trainer.save(&p, base_meta.clone())?;
            checkpoints.push(p);
        }
    }
    log.flush()?;
    Ok(TrainSummary {
        records,
        checkpoints,
        final_step: trainer.step,
    })
}

/// Read a training log back.
pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    std::io::BufReader::new(std::fs::File::open(path)?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn read_baseline(path: &Path) -> Result<MetricVector> {
    let b: Baseline = serde_json::from_slice(&std::fs::read(path)?)?;
    let v = MetricVector(b.vector());
    v.validate()?;
    Ok(v)
}

#[derive(Debug, Clone)]
pub enum EvalOutcome {
    /// Multi-task checkpoint: a full report, also written to disk.
    Report(EvalReport),
    /// Teacher checkpoint: its task's score on the evaluation set.
    Teacher {
        task: TaskKind,
        score: f64,
        logged: Option<f64>,
    },
}

/// Evaluate a checkpoint (the latest multi-task one by default) on the
/// evaluation set and write `results.csv` and `report.md`.
pub fn eval(
    cfg: &ExperimentConfig,
    ck: Option<&Path>,
    allow_mismatch: bool,
) -> Result<EvalOutcome> {
    let path = match ck {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(cfg)?
            .ok_or_else(|| Error::Config("no checkpoint to evaluate; run train first".into()))?,
    };
    let meta = checkpoint::read_meta(&path)?;
    if meta.config_hash != cfg.hash() && !allow_mismatch {
        return Err(Error::HashMismatch {
            checkpoint: meta.config_hash,
            config: cfg.hash(),
        });
    }
    let samples = load_eval_samples(cfg, allow_mismatch)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    if meta.task.is_some() {
        let (model, teacher, meta) = load_teacher(&path)?;
        let scores = evaluate(&model, &refs, cfg.eval.batch_size)?;
        let logged = meta.extra.get("val_metric").and_then(|v| v.as_f64());
        return Ok(EvalOutcome::Teacher {
            task: teacher.task,
            score: scores.get(teacher.task).unwrap_or(0.0),
            logged,
        });
    }
    let model = new_model(cfg)?;
    checkpoint::load(&path)?.restore_params(model.store())?;
    let scores = evaluate(&model, &refs, cfg.eval.batch_size)?;
    let baseline = cfg
        .eval
        .baselines
        .as_deref()
        .map(read_baseline)
        .transpose()?;
    let report = report_from(&cfg.name, &scores, baseline, &meta.config_hash)?;
    emit_report(
        std::slice::from_ref(&report),
        &cfg.report_dir(),
        ReportFormat::Both,
    )?;
    Ok(EvalOutcome::Report(report))
}

pub fn report_from(
    run: &str,
    s: &TaskScores,
    baseline: Option<MetricVector>,
    hash: &str,
) -> Result<EvalReport> {
    let missing = |t: TaskKind| Error::Invalid(format!("no {t} score to report"));
    EvalReport::new(
        run,
        s.map.ok_or_else(|| missing(TaskKind::Det))?,
        s.miou_sem.ok_or_else(|| missing(TaskKind::Sem))?,
        s.miou_driv.ok_or_else(|| missing(TaskKind::Driv))?,
        s.iou_lane.ok_or_else(|| missing(TaskKind::Lane))?,
        baseline,
        hash,
    )
}

/// Recompute Avg and the multi-task delta for every bundled published row.
pub fn reproduce_tables() -> Result<Vec<RowCheck>> {
    check_tables(&PublishedTables::bundled())
}

/// Loss-curve and metric-bar images from the run's log and report.
pub fn plot(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(cfg.plot_dir())?;
    let mut out = Vec::new();
    let log = cfg.log_path();
    if log.exists() {
        let p = cfg.plot_dir().join("loss_curve.png");
        let recs: Vec<StepRecord> = read_log(&log)?.into_iter().map(|l| l.record).collect();
        plot::loss_curve(&recs, &p)?;
        out.push(p);
    }
    let csv = cfg.report_dir().join("results.csv");
    if csv.exists() {
        let p = cfg.plot_dir().join("metrics.png");
        let reports = crate::metrics::report::from_csv(&std::fs::read_to_string(&csv)?)?;
        plot::metric_bars(&reports, &p)?;
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "nothing to plot under {}",
            cfg.out_dir.display()
        )));
    }
    Ok(out)
}
