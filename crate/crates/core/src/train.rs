//! The training loop: batch sampling, loss balancing, and optimizer steps.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::balancing::{
    fixed_combine, flat_grad, gradnorm_step, l2_norm, mgda_combine, uncertainty_combine,
    BalanceStrategy, BalancerState, GradNormState, TaskLosses,
};
use crate::data::io::load_with_entry;
use crate::data::{DiskDataset, Sample, SplitManifest};
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{AdamW, Batch, Init, MultiTaskModel, OptimizerConfig};
use crate::schedule::{Draw, ScheduleConfig, Scheduler};
use crate::tasks::{PerTask, TaskKind, TaskSet};
use crate::util::stream_rng;

const LOG_VAR: &str = "balancer.log_var";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps; 0 derives the count from `epochs`.
    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Warmup length in epochs; overrides `optimizer.warmup_steps` when set.
    pub warmup_epochs: Option<f64>,
    pub use_pseudo: bool,
    pub optimizer: OptimizerConfig,
    pub balance: BalanceStrategy,
    pub schedule: ScheduleConfig,
    /// Checkpoint interval in steps; 0 saves once per epoch.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 0,
            epochs: 36,
            batch_size: 16,
            warmup_epochs: Some(1.0),
            use_pseudo: false,
            optimizer: OptimizerConfig::default(),
            balance: BalanceStrategy::default(),
            schedule: ScheduleConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.steps == 0 && self.epochs == 0 {
            return Err(Error::Config("set steps or epochs".into()));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning rate must be positive and weight decay non-negative".into(),
            ));
        }
        self.balance.validate()
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * self.steps_per_epoch(n_train)
        }
    }

    /// Optimizer settings with the warmup resolved to steps.
    pub fn resolved_optimizer(&self, n_train: usize) -> OptimizerConfig {
        let mut o = self.optimizer.clone();
        if let Some(e) = self.warmup_epochs {
            o.warmup_steps = (e * self.steps_per_epoch(n_train) as f64).round() as usize;
        }
        o
    }
}

/// In-memory training samples indexed by available task.
#[derive(Debug, Clone)]
pub struct DataPool {
    samples: Vec<Sample>,
    by_task: PerTask<Vec<usize>>,
}

impl DataPool {
    pub fn new(samples: Vec<Sample>) -> Self {
        let mut by_task = PerTask::<Vec<usize>>::default();
        for (i, s) in samples.iter().enumerate() {
            for t in s.split_tags.iter() {
                by_task[t].push(i);
            }
        }
        DataPool { samples, by_task }
    }

    /// Load every manifest entry with its labels for `tasks`.
    pub fn load(
        ds: &DiskDataset,
        manifest: &SplitManifest,
        tasks: TaskSet,
        use_pseudo: bool,
    ) -> Result<Self> {
        let samples = manifest
            .entries
            .iter()
            .filter(|e| !e.available(use_pseudo).intersection(tasks).is_empty())
            .map(|e| load_with_entry(ds, e, tasks, use_pseudo))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(samples))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn labeled(&self, task: TaskKind) -> usize {
        self.by_task[task].len()
    }

    /// Joint draws sample from the whole pool; single-task draws from that
    /// task's labeled subset. Indices are distinct within a batch.
    pub fn sample_batch(
        &self,
        draw: Draw,
        batch_size: usize,
        seed: u64,
        step: usize,
    ) -> Result<Vec<&Sample>> {
        let pool: Vec<usize> = match draw {
            Draw::All => (0..self.samples.len()).collect(),
            Draw::Task(t) => self.by_task[t].clone(),
        };
        if pool.is_empty() {
            return Err(Error::Invalid(format!(
                "no training samples for draw `{draw}`"
            )));
        }
        let mut rng = stream_rng(seed, "data", step as u64);
        let picks = index::sample(&mut rng, pool.len(), batch_size.min(pool.len()));
        Ok(picks.into_iter().map(|i| &self.samples[pool[i]]).collect())
    }
}

/// Turns per-task losses into the objective for one step.
#[derive(Debug, Clone)]
pub struct Balancer {
    pub strategy: BalanceStrategy,
    gradnorm: Option<GradNormState>,
    log_var: Option<Var>,
    last_mgda: Option<(usize, f64)>,
    lambda: [f64; 4],
}

impl Balancer {
    /// Uncertainty weighting adds its log-variance vector to `model`'s store.
    pub fn new(strategy: BalanceStrategy, model: &MultiTaskModel) -> Result<Self> {
        strategy.validate()?;
        let mut b = Balancer {
            strategy: strategy.clone(),
            gradnorm: None,
            log_var: None,
            last_mgda: None,
            lambda: [1.0; 4],
        };
        match &strategy {
            BalanceStrategy::Fixed { lambda } => b.lambda = *lambda,
            BalanceStrategy::Uncertainty => {
                model.store().get(LOG_VAR, &[4], Init::Zeros)?;
                b.log_var = model.store().var(LOG_VAR);
            }
            BalanceStrategy::GradNorm { alpha, .. } => {
                b.gradnorm = Some(GradNormState::new(*alpha, [1.0; 4]))
            }
            BalanceStrategy::Mgda { .. } => {}
        }
        Ok(b)
    }

    /// Objective to differentiate. GradNorm and MGDA run extra backward
    /// passes over their gradient scope; GradNorm then updates its weights.
    pub fn combine(&mut self, model: &MultiTaskModel, losses: &TaskLosses) -> Result<Tensor> {
        match &self.strategy {
            BalanceStrategy::Fixed { lambda } => fixed_combine(losses, lambda),
            BalanceStrategy::Uncertainty => {
                uncertainty_combine(losses, self.log_var.as_ref().expect("created in new"))
            }
            BalanceStrategy::GradNorm { lr, scope, .. } => {
                let (lr, scope) = (*lr, *scope);
                let state = self.gradnorm.as_mut().expect("created in new");
                let values = losses.values()?;
                state.observe(&values);
                let vars = model.scope_vars(scope);
                let mut norms = PerTask([None; 4]);
                for (t, l) in losses.active() {
                    let lam = state.lambda[t.index()];
                    norms[t] = Some(lam * l2_norm(&flat_grad(l, &vars)?));
                }
                let total = fixed_combine(losses, &state.lambda)?;
                gradnorm_step(state, &values, &norms, lr)?;
                self.lambda = state.lambda;
                Ok(total)
            }
            BalanceStrategy::Mgda { scope } => {
                let vars = model.scope_vars(*scope);
                let mut grads = PerTask::<Option<Vec<f64>>>::default();
                for (t, l) in losses.active() {
                    grads[t] = Some(flat_grad(l, &vars)?);
                }
                let (total, w, sol) = mgda_combine(losses, &grads)?;
                self.lambda = w.0;
                self.last_mgda = Some((sol.iterations, sol.gap));
                Ok(total)
            }
        }
    }

    pub fn state(&self) -> Result<BalancerState> {
        let log_var = match &self.log_var {
            Some(v) => {
                let x = v.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Some([x[0], x[1], x[2], x[3]])
            }
            None => None,
        };
        let lambda = match &self.gradnorm {
            Some(g) => g.lambda,
            None => self.lambda,
        };
        Ok(BalancerState {
            strategy: self.strategy.name().to_string(),
            lambda,
            log_var,
            l0: self.gradnorm.as_ref().map(|g| g.l0),
            mgda_iterations: self.last_mgda.map(|m| m.0),
            mgda_gap: self.last_mgda.map(|m| m.1),
        })
    }

    pub fn restore(&mut self, state: &BalancerState) {
        self.lambda = state.lambda;
        if let (Some(g), Some(l0)) = (self.gradnorm.as_mut(), state.l0) {
            g.lambda = state.lambda;
            g.l0 = l0;
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub draw: String,
    pub batch_ids: Vec<String>,
    pub losses: PerTask<Option<f64>>,
    pub total: f64,
    pub lr: f64,
    pub balancer: BalancerState,
}

pub struct Trainer {
    pub model: MultiTaskModel,
    pub opt: AdamW,
    pub balancer: Balancer,
    pub scheduler: Scheduler,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: MultiTaskModel, cfg: TrainConfig, n_train: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let balancer = Balancer::new(cfg.balance.clone(), &model)?;
        let mut opt = AdamW::new(model.store().trainable(), cfg.resolved_optimizer(n_train))?;
        opt.exclude_decay("balancer");
        let scheduler = Scheduler::new(&cfg.schedule, model.heads(), seed)?;
        Ok(Trainer {
            model,
            opt,
            balancer,
            scheduler,
            cfg,
            seed,
            step: 0,
        })
    }

    pub fn device(&self) -> Device {
        self.model.store().device()
    }

    /// Per-task losses on `batch` for the tasks in `tasks`, without updating.
    pub fn losses(&self, batch: &Batch, tasks: TaskSet) -> Result<TaskLosses> {
        let out = self.model.forward(
            &batch.images,
            &batch.rows(tasks.intersection(self.model.heads())),
        )?;
        self.model.losses(&out, batch)
    }

    /// Forward, combine, backward, and update on a prepared batch.
    pub fn step_on(&mut self, batch: &Batch, draw: Draw) -> Result<StepRecord> {
        let tasks = draw.tasks(self.model.heads());
        let losses = self.losses(batch, tasks)?;
        if losses.mask().is_empty() {
            return Err(Error::Invalid(format!(
                "batch at step {} has no labels for `{draw}`",
                self.step
            )));
        }
        let values = losses.values().map_err(|_| Error::NonFiniteLoss {
            step: self.step,
            batch: batch.ids.clone(),
        })?;
        let total = self.balancer.combine(&self.model, &losses)?;
        let total_v = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total_v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch: batch.ids.clone(),
            });
        }
        let lr = self.opt.cfg.lr_at(self.opt.step);
        let grads = total.backward()?;
        self.opt.step(&grads)?;
        let rec = StepRecord {
            step: self.step,
            draw: draw.to_string(),
            batch_ids: batch.ids.clone(),
            losses: values,
            total: total_v,
            lr,
            balancer: self.balancer.state()?,
        };
        self.step += 1;
        self.scheduler.step = self.step;
        Ok(rec)
    }

    /// Draw the next task(s), sample a batch from `pool`, and step.
    pub fn train_step(&mut self, pool: &DataPool) -> Result<StepRecord> {
        let draw = self.scheduler.draw_at(self.step);
        let samples = pool.sample_batch(draw, self.cfg.batch_size, self.seed, self.step)?;
        let batch = Batch::from_samples(&samples, self.model.store().dtype(), &self.device())?;
        self.step_on(&batch, draw)
    }

    pub fn save(&self, path: &Path, mut meta: CheckpointMeta) -> Result<()> {
        meta.step = self.step;
        meta.extra.insert(
            "balancer".into(),
            serde_json::to_value(self.balancer.state()?)?,
        );
        checkpoint::save(path, self.model.store(), Some(&self.opt), &meta)
    }

    /// Continue from a checkpoint written by [`Trainer::save`].
    pub fn resume(&mut self, path: &Path) -> Result<CheckpointMeta> {
        let ck = checkpoint::load(path)?;
        ck.restore_params(self.model.store())?;
        ck.restore_optimizer(&mut self.opt, self.model.store().dtype())?;
        if let Some(b) = ck.meta.extra.get("balancer") {
            self.balancer.restore(&serde_json::from_value(b.clone())?);
        }
        self.step = ck.meta.step;
        self.scheduler.step = self.step;
        Ok(ck.meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};
    use crate::model::{ModelConfig, ParamStore};
    use crate::prompting::PromptConfig;

    fn samples(n: usize, tags: &[TaskSet]) -> Vec<Sample> {
        let spec = SceneSpec {
            height: 64,
            width: 64,
            ..Default::default()
        };
        (0..n)
            .map(|i| {
                let mut s = generate_scene(i as u64, &spec).unwrap();
                s.split_tags = tags[i % tags.len()];
                s
            })
            .collect()
    }

    fn trainer(balance: BalanceStrategy) -> Trainer {
        let model = MultiTaskModel::new(
            ModelConfig::tiny(8),
            PromptConfig::disabled(),
            TaskSet::FULL,
            ParamStore::new(0, DType::F32),
        )
        .unwrap();
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 2,
            warmup_epochs: None,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..Default::default()
            },
            balance,
            ..Default::default()
        };
        Trainer::new(model, cfg, 4, 0).unwrap()
    }

    #[test]
    fn every_strategy_steps() {
        let pool = DataPool::new(samples(4, &[TaskSet::FULL]));
        for b in [
            BalanceStrategy::default(),
            BalanceStrategy::Uncertainty,
            BalanceStrategy::GradNorm {
                alpha: 1.5,
                lr: 0.025,
                scope: crate::balancing::GradScope::LastP5,
            },
            BalanceStrategy::Mgda {
                scope: crate::balancing::GradScope::SharedEncoder,
            },
        ] {
            let name = b.name();
            let mut t = trainer(b);
            for _ in 0..2 {
                let r = t.train_step(&pool).unwrap();
                assert!(r.total.is_finite(), "{name}");
                assert_eq!(r.losses.0.iter().filter(|l| l.is_some()).count(), 4);
                let s: f64 = r.balancer.lambda.iter().sum();
                match name {
                    "gradnorm" => assert!((s - 4.0).abs() < 1e-9),
                    "mgda" => assert!((s - 1.0).abs() < 1e-9),
                    _ => {}
                }
            }
            assert_eq!(t.step, 2);
        }
    }

    #[test]
    fn task_draws_use_labeled_pool() {
        let pool = DataPool::new(samples(
            8,
            &[
                TaskSet::single(TaskKind::Det),
                TaskSet::single(TaskKind::Lane),
            ],
        ));
        assert_eq!(pool.labeled(TaskKind::Det), 4);
        for step in 0..5 {
            let b = pool
                .sample_batch(Draw::Task(TaskKind::Lane), 3, 1, step)
                .unwrap();
            assert_eq!(b.len(), 3);
            assert!(b.iter().all(|s| s.split_tags.contains(TaskKind::Lane)));
        }
        assert!(pool
            .sample_batch(Draw::Task(TaskKind::Sem), 3, 1, 0)
            .is_err());
    }

    #[test]
    fn resume_reproduces_next_step() {
        let dir = tempfile::tempdir().unwrap();
        let pool = DataPool::new(samples(4, &[TaskSet::FULL]));
        let mut a = trainer(BalanceStrategy::default());
        a.train_step(&pool).unwrap();
        let meta = CheckpointMeta {
            config_hash: "h".into(),
            step: 0,
            seed: 0,
            task: None,
            manifest_hash: None,
            extra: Default::default(),
        };
        a.save(&dir.path().join("ck.safetensors"), meta).unwrap();
        let next = a.train_step(&pool).unwrap();

        let mut b = trainer(BalanceStrategy::default());
        b.resume(&dir.path().join("ck.safetensors")).unwrap();
        assert_eq!(b.step, 1);
        let again = b.train_step(&pool).unwrap();
        assert_eq!(again.step, next.step);
        assert_eq!(again.total, next.total);
        assert_eq!(again.batch_ids, next.batch_ids);
    }
}
