use std::path::Path;

use uniperc::data::DiskDataset;
use uniperc::model::checkpoint;
use uniperc::model::ModelConfig;
use uniperc::runner::{self, EvalOutcome, ExperimentConfig, Preset};
use uniperc::{Error, TaskKind, TaskSet};

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = Preset::Desk.config();
    cfg.out_dir = dir.to_path_buf();
    cfg.data.train_samples = 16;
    cfg.data.eval_samples = 4;
    cfg.model = ModelConfig::tiny(8);
    cfg.prompting.n = [1; 4];
    cfg.train.steps = 6;
    cfg.train.batch_size = 4;
    cfg.train.checkpoint_every = 3;
    cfg.teacher.steps = 20;
    cfg.teacher.batch_size = 4;
    cfg.eval.batch_size = 4;
    cfg
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small(&tmp.path().join("a"));
    let b = small(&tmp.path().join("b"));
    let oa = runner::gen_data(&a, false).unwrap();
    let ob = runner::gen_data(&b, false).unwrap();
    assert_eq!(oa.train_manifest_hash, ob.train_manifest_hash);
    assert_eq!(oa.eval_manifest_hash, ob.eval_manifest_hash);
    assert!(matches!(runner::gen_data(&a, false), Err(Error::Config(_))));
    runner::gen_data(&a, true).unwrap();

    let m = DiskDataset::open(&a.train_dir())
        .unwrap()
        .manifest()
        .unwrap();
    m.audit_disjoint().unwrap();
    assert_eq!(m.entries.len(), 16);
    assert!(m.entries.iter().all(|e| e.tasks.iter().count() == 1));
    let eval = DiskDataset::open(&a.eval_dir())
        .unwrap()
        .manifest()
        .unwrap();
    assert!(eval.entries.iter().all(|e| e.tasks == TaskSet::FULL));

    let sheet = image::open(&oa.contact_sheet).unwrap();
    assert!(sheet.width() > 0 && sheet.height() > 0);
}

#[test]
fn prompt_banks_rebuild_identically_and_stale_banks_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    runner::gen_data(&cfg, false).unwrap();
    let first: Vec<String> = runner::build_prompts(&cfg)
        .unwrap()
        .iter()
        .map(|b| b.hash())
        .collect();
    let again: Vec<String> = runner::build_prompts(&cfg)
        .unwrap()
        .iter()
        .map(|b| b.hash())
        .collect();
    assert_eq!(first, again);

    cfg.prompting.seed += 1;
    assert!(runner::train(&cfg, false).is_err());
}

#[test]
fn teachers_use_only_their_labels_and_record_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    runner::gen_data(&cfg, false).unwrap();
    let manifest = DiskDataset::open(&cfg.train_dir())
        .unwrap()
        .manifest()
        .unwrap();
    let reports = runner::train_teachers(&cfg, Some(TaskSet::single(TaskKind::Driv))).unwrap();
    assert_eq!(reports.len(), 1);
    let r = &reports[0];
    let labeled = manifest.labeled_ids(TaskKind::Driv);
    assert!(!r.accessed.is_empty());
    assert!(r.accessed.iter().all(|id| labeled.contains(id.as_str())));
    assert!(
        r.end_loss < r.start_loss,
        "{} -> {}",
        r.start_loss,
        r.end_loss
    );

    let access: Vec<String> =
        serde_json::from_slice(&std::fs::read(cfg.teacher_dir().join("driv.access.json")).unwrap())
            .unwrap();
    assert_eq!(access.len(), r.accessed.len());

    let meta = checkpoint::read_meta(&r.teacher.checkpoint).unwrap();
    assert_eq!(meta.task.as_deref(), Some("driv"));
    assert_eq!(meta.config_hash, cfg.hash());
    assert_eq!(meta.manifest_hash, Some(manifest.hash().unwrap()));

    match runner::eval(&cfg, Some(&r.teacher.checkpoint), false).unwrap() {
        EvalOutcome::Teacher {
            task,
            score,
            logged,
        } => {
            assert_eq!(task, TaskKind::Driv);
            assert_eq!(Some(score), logged);
            assert_eq!(score, r.val_metric);
        }
        EvalOutcome::Report(_) => panic!("teacher evaluated as a multi-task run"),
    }
}

#[test]
fn train_eval_resume_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    runner::gen_data(&cfg, false).unwrap();
    runner::build_prompts(&cfg).unwrap();
    let full = runner::train(&cfg, false).unwrap();
    assert_eq!(full.final_step, 6);
    assert_eq!(full.checkpoints.len(), 2);

    runner::eval(&cfg, None, false).unwrap();
    let csv_a = std::fs::read(cfg.report_dir().join("results.csv")).unwrap();
    runner::eval(&cfg, None, false).unwrap();
    let csv_b = std::fs::read(cfg.report_dir().join("results.csv")).unwrap();
    assert_eq!(csv_a, csv_b);

    let mut other = cfg.clone();
    other.train.optimizer.lr *= 2.0;
    assert!(matches!(
        runner::eval(&other, None, false),
        Err(Error::HashMismatch { .. })
    ));
    assert!(matches!(
        runner::eval(&other, None, true),
        Ok(EvalOutcome::Report(_))
    ));

    std::fs::remove_file(cfg.checkpoint_dir().join("step_000006.safetensors")).unwrap();
    let resumed = runner::train(&cfg, true).unwrap();
    assert_eq!(resumed.final_step, 6);
    assert_eq!(
        resumed.records.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![3, 4, 5]
    );
    let log = runner::read_log(&cfg.log_path()).unwrap();
    assert_eq!(
        log.iter().map(|l| l.record.step).collect::<Vec<_>>(),
        (0..6).collect::<Vec<_>>()
    );
    for (a, b) in full.records[3..].iter().zip(&resumed.records) {
        assert_eq!(a.batch_ids, b.batch_ids);
        assert!(
            (a.total - b.total).abs() < 1e-9,
            "{} vs {}",
            a.total,
            b.total
        );
    }

    let plots = runner::plot(&cfg).unwrap();
    assert!(plots.iter().all(|p| image::open(p).is_ok()));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.yaml");
    std::fs::write(&bad, "train:\n  stepz: 10\n").unwrap();
    assert!(ExperimentConfig::load(Some(&bad), Some(Preset::Desk), None).is_err());
    let good = tmp.path().join("good.yaml");
    std::fs::write(&good, "train:\n  steps: 10\n").unwrap();
    let cfg = ExperimentConfig::load(Some(&good), Some(Preset::Desk), Some(5)).unwrap();
    assert_eq!((cfg.train.steps, cfg.seed), (10, 5));
}
