use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use uniperc::runner::{self, EvalOutcome, ExperimentConfig, Preset};
use uniperc::{TaskKind, TaskSet};

#[derive(Parser)]
#[command(
    name = "uniperc",
    version,
    about = "Multi-task driving perception with visual-exemplar prompts"
)]
struct Cli {
    /// YAML or JSON config overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset: paper or desk.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing generated data.
    #[arg(long, global = true)]
    force: bool,
    /// Evaluate even when the checkpoint was produced under another config.
    #[arg(long, global = true)]
    allow_mismatch: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic training and evaluation sets.
    GenData,
    /// Render exemplars and encode one prompt bank per task.
    BuildPrompts,
    /// Train single-task teachers (default: every task with unlabeled images).
    TrainTeacher {
        #[arg(long)]
        task: Option<TaskKind>,
    },
    /// Fill missing annotations with teacher predictions.
    PseudoLabel,
    /// Multi-task training.
    Train {
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and write results.csv and report.md.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recheck Avg and ΔMTL for every bundled published row.
    ReproduceTables,
    /// Loss-curve and metric-bar images.
    Plot,
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Cmd::ReproduceTables = cli.cmd {
        let checks = runner::reproduce_tables()?;
        let mut ok = true;
        for c in &checks {
            println!("{}", c.line());
            ok &= c.ok();
        }
        let bad = checks.iter().filter(|c| !c.ok()).count();
        println!("{} rows checked, {bad} mismatched", checks.len());
        return Ok(ok);
    }
    let preset: Preset = cli.preset.parse()?;
    let cfg = ExperimentConfig::load(cli.config.as_deref(), Some(preset), cli.seed)
        .context("loading config")?;
    println!("config {} ({})", cfg.hash(), cfg.name);
    match cli.cmd {
        Cmd::GenData => {
            let out = runner::gen_data(&cfg, cli.force)?;
            println!("train manifest {}", out.train_manifest_hash);
            println!("eval manifest {}", out.eval_manifest_hash);
            println!("contact sheet {}", out.contact_sheet.display());
        }
        Cmd::BuildPrompts => {
            for b in runner::build_prompts(&cfg)? {
                println!(
                    "{} K={} D={} n={} hash {}",
                    b.meta.task,
                    b.meta.k,
                    b.meta.d,
                    b.meta.n,
                    b.hash()
                );
            }
        }
        Cmd::TrainTeacher { task } => {
            for r in runner::train_teachers(&cfg, task.map(TaskSet::single))? {
                println!(
                    "{} teacher: {} samples, loss {:.4} -> {:.4}, val {:.2}, {}",
                    r.teacher.task,
                    r.accessed.len(),
                    r.start_loss,
                    r.end_loss,
                    r.val_metric,
                    r.teacher.checkpoint.display()
                );
            }
        }
        Cmd::PseudoLabel => {
            let r = runner::pseudo_label(&cfg)?;
            for t in TaskKind::ALL {
                println!("{t}: {} pseudo annotations", r.written[t]);
            }
            println!("{} pseudo boxes", r.boxes);
        }
        Cmd::Train { resume } => {
            let s = runner::train(&cfg, resume)?;
            if let (Some(a), Some(b)) = (s.records.first(), s.records.last()) {
                println!(
                    "steps {}..{}: loss {:.4} -> {:.4}",
                    a.step, b.step, a.total, b.total
                );
            }
            for c in &s.checkpoints {
                println!("checkpoint {}", c.display());
            }
        }
        Cmd::Eval { checkpoint } => {
            match runner::eval(&cfg, checkpoint.as_deref(), cli.allow_mismatch)? {
                EvalOutcome::Report(r) => {
                    print!(
                        "{}",
                        uniperc::metrics::report::to_markdown(std::slice::from_ref(&r))
                    );
                    println!("written to {}", cfg.report_dir().display());
                }
                EvalOutcome::Teacher {
                    task,
                    score,
                    logged,
                } => {
                    println!(
                        "{task} teacher score {score:.4} (logged {})",
                        logged.map_or("n/a".into(), |v| format!("{v:.4}"))
                    );
                }
            }
        }
        Cmd::Plot => {
            for p in runner::plot(&cfg)? {
                println!("{}", p.display());
            }
        }
        Cmd::ReproduceTables => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
