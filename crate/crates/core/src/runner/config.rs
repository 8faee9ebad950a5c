//! Experiment configuration, presets, and config hashing.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::balancing::BalanceStrategy;
use crate::data::split::DEFAULT_SEM_FRACTION;
use crate::data::{SceneSpec, SplitSetting};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OptimizerConfig};
use crate::prompting::PromptConfig;
use crate::schedule::{ScheduleConfig, DEFAULT_DET_THRESHOLD};
use crate::train::TrainConfig;
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub setting: SplitSetting,
    pub train_samples: usize,
    /// Fully labeled held-out images generated from separate seeds.
    pub eval_samples: usize,
    pub scene: SceneSpec,
    /// Fraction of images with semantic labels in the full setting.
    pub sem_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            setting: SplitSetting::Full,
            train_samples: 200,
            eval_samples: 40,
            scene: SceneSpec::default(),
            sem_fraction: DEFAULT_SEM_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Optimizer steps; 0 uses the epoch count of `train`.
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate; `None` reuses the multi-task rate.
    pub lr: Option<f64>,
    pub det_threshold: f32,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 0,
            batch_size: 16,
            lr: None,
            det_threshold: DEFAULT_DET_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// JSON file `{"det": .., "sem": .., "driv": .., "lane": ..}` of
    /// single-task scores for the multi-task delta.
    pub baselines: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: 16,
            baselines: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub prompting: PromptConfig,
    pub train: TrainConfig,
    pub teacher: TeacherConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Preset::Paper.config()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Published hyperparameters.
    Paper,
    /// Scaled down for CPU runs of a few minutes.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected paper or desk)"
            ))),
        }
    }
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Paper => ExperimentConfig {
                name: "paper".into(),
                seed: 0,
                out_dir: PathBuf::from("runs/paper"),
                data: DataConfig {
                    train_samples: 2000,
                    eval_samples: 400,
                    ..Default::default()
                },
                model: ModelConfig::default(),
                prompting: PromptConfig::default(),
                train: TrainConfig::default(),
                teacher: TeacherConfig::default(),
                eval: EvalConfig::default(),
            },
            Preset::Desk => ExperimentConfig {
                name: "desk".into(),
                seed: 0,
                out_dir: PathBuf::from("runs/desk"),
                data: DataConfig {
                    setting: SplitSetting::DisjointBalance,
                    train_samples: 200,
                    eval_samples: 40,
                    scene: SceneSpec {
                        height: 64,
                        width: 64,
                        min_objects: 2,
                        max_objects: 5,
                    },
                    ..Default::default()
                },
                model: ModelConfig {
                    backbone_widths: [8, 16, 24, 32],
                    d_model: 32,
                    encoder_depth: 1,
                    encoder_heads: 4,
                    ffn_hidden: 64,
                    decoder_layers: 2,
                    num_queries: 10,
                    seg_dim: 16,
                    ..Default::default()
                },
                prompting: PromptConfig::default(),
                train: TrainConfig {
                    steps: 300,
                    batch_size: 8,
                    warmup_epochs: None,
                    optimizer: OptimizerConfig {
                        lr: 2e-3,
                        warmup_steps: 10,
                        grad_clip: 5.0,
                        ..Default::default()
                    },
                    balance: BalanceStrategy::default(),
                    schedule: ScheduleConfig::Joint,
                    checkpoint_every: 100,
                    ..Default::default()
                },
                teacher: TeacherConfig {
                    steps: 100,
                    batch_size: 8,
                    ..Default::default()
                },
                eval: EvalConfig {
                    batch_size: 20,
                    baselines: None,
                },
            },
        }
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    /// Start from `preset` (paper when absent), overlay the YAML or JSON
    /// file, then apply the seed override. Unknown keys are rejected.
    pub fn load(path: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> Result<Self> {
        let mut tree = serde_json::to_value(preset.unwrap_or(Preset::Paper).config())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            let over: serde_json::Value = serde_yaml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if !over.is_null() {
                merge(&mut tree, over);
            }
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with a partial JSON tree overlaid; unknown keys are rejected.
    pub fn overlay(&self, over: serde_json::Value) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        merge(&mut tree, over);
        let cfg: ExperimentConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        if self.data.train_samples < self.data.setting.min_samples() {
            return Err(Error::Config(format!(
                "{} needs at least {} training samples",
                self.data.setting,
                self.data.setting.min_samples()
            )));
        }
        if self.data.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        self.model.validate()?;
        self.prompting.validate()?;
        self.train.validate()?;
        if self.teacher.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if let Some(p) = &self.eval.baselines {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "baselines file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Hash of everything that affects results; the output directory is
    /// excluded so runs can be moved.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(
            serde_json::to_string(&c)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Hash of the inputs to dataset generation.
    pub fn data_hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(&(self.seed, &self.data))
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Hash of the inputs to prompt-bank building.
    pub fn prompt_hash(&self) -> String {
        let key = (
            self.seed,
            &self.data,
            &self.prompting.backend,
            &self.prompting.n,
            self.prompting.alpha,
            self.prompting.seed,
        );
        sha256_hex(
            serde_json::to_string(&key)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Teacher settings folded into a single-task training config.
    pub fn teacher_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.steps = self.teacher.steps;
        t.batch_size = self.teacher.batch_size;
        if let Some(lr) = self.teacher.lr {
            t.optimizer.lr = lr;
        }
        t.balance = BalanceStrategy::default();
        t.schedule = ScheduleConfig::Joint;
        t.use_pseudo = false;
        t
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out_dir.join("data").join("train")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("data").join("eval")
    }
    pub fn prompt_dir(&self) -> PathBuf {
        self.out_dir.join("prompts")
    }
    pub fn teacher_dir(&self) -> PathBuf {
        self.out_dir.join("teachers")
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }
    pub fn plot_dir(&self) -> PathBuf {
        self.out_dir.join("plots")
    }
    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.jsonl")
    }
}
