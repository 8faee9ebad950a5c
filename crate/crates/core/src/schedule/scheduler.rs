//! Choosing which task(s) each training step works on.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{TaskKind, TaskSet};
use crate::util::stream_rng;

/// Default per-task epoch budget of the weighted sampler.
pub const DEFAULT_EPOCHS: f64 = 36.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Joint,
    Uniform,
    /// Draw probability proportional to each task's epoch budget, ordered
    /// det, sem, driv, lane.
    Weighted {
        #[serde(default = "default_epochs")]
        epochs: [f64; 4],
    },
    RoundRobin,
}

fn default_epochs() -> [f64; 4] {
    [DEFAULT_EPOCHS; 4]
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Joint
    }
}

impl ScheduleConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleConfig::Joint => "joint",
            ScheduleConfig::Uniform => "uniform",
            ScheduleConfig::Weighted { .. } => "weighted",
            ScheduleConfig::RoundRobin => "round-robin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draw {
    All,
    Task(TaskKind),
}

impl Draw {
    pub fn tasks(self, all: TaskSet) -> TaskSet {
        match self {
            Draw::All => all,
            Draw::Task(t) => TaskSet::single(t),
        }
    }
}

impl fmt::Display for Draw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Draw::All => f.write_str("all"),
            Draw::Task(t) => write!(f, "{t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Joint,
    Sampled,
    RoundRobin,
}

/// Every draw is a pure function of `(seed, step)`, so a resumed run sees
/// the same sequence.
#[derive(Debug, Clone)]
pub struct Scheduler {
    mode: Mode,
    tasks: Vec<TaskKind>,
    weights: Vec<f64>,
    dist: Option<WeightedIndex<f64>>,
    seed: u64,
    pub step: usize,
}

impl Scheduler {
    pub fn new(cfg: &ScheduleConfig, tasks: TaskSet, seed: u64) -> Result<Self> {
        let list: Vec<TaskKind> = tasks.iter().collect();
        match cfg {
            ScheduleConfig::Joint => Self::build(Mode::Joint, list, None, seed),
            ScheduleConfig::RoundRobin => Self::build(Mode::RoundRobin, list, None, seed),
            ScheduleConfig::Uniform => {
                let w = vec![1.0; list.len()];
                Self::build(Mode::Sampled, list, Some(w), seed)
            }
            ScheduleConfig::Weighted { epochs } => {
                let w = list.iter().map(|t| epochs[t.index()]).collect();
                Self::build(Mode::Sampled, list, Some(w), seed)
            }
        }
    }

    /// Weighted sampler over an explicit task list.
    pub fn weighted(tasks: Vec<TaskKind>, budgets: Vec<f64>, seed: u64) -> Result<Self> {
        if tasks.len() != budgets.len() {
            return Err(Error::Config(format!(
                "{} tasks but {} budgets",
                tasks.len(),
                budgets.len()
            )));
        }
        Self::build(Mode::Sampled, tasks, Some(budgets), seed)
    }

    fn build(
        mode: Mode,
        tasks: Vec<TaskKind>,
        weights: Option<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("scheduler needs at least one task".into()));
        }
        let (weights, dist) = match weights {
            Some(w) => {
                if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                    return Err(Error::Config(format!(
                        "epoch budgets must be finite and non-negative: {w:?}"
                    )));
                }
                let d = WeightedIndex::new(&w)
                    .map_err(|e| Error::Config(format!("epoch budgets {w:?}: {e}")))?;
                (w, Some(d))
            }
            None => (vec![1.0; tasks.len()], None),
        };
        Ok(Scheduler {
            mode,
            tasks,
            weights,
            dist,
            seed,
            step: 0,
        })
    }

    /// Draw probabilities over the scheduler's tasks.
    pub fn probabilities(&self) -> Vec<(TaskKind, f64)> {
        let total: f64 = self.weights.iter().sum();
        self.tasks
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| (*t, w / total))
            .collect()
    }

    pub fn draw_at(&self, step: usize) -> Draw {
        match self.mode {
            Mode::Joint => Draw::All,
            Mode::RoundRobin => Draw::Task(self.tasks[step % self.tasks.len()]),
            Mode::Sampled => {
                let mut rng = stream_rng(self.seed, "scheduler", step as u64);
                Draw::Task(self.tasks[self.dist.as_ref().expect("sampled mode").sample(&mut rng)])
            }
        }
    }

    pub fn next_task(&mut self) -> Draw {
        let d = self.draw_at(self.step);
        self.step += 1;
        d
    }

    /// Round-robin position in `[0, T)`.
    pub fn cursor(&self) -> usize {
        self.step % self.tasks.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_cycle() {
        let mut s = Scheduler::new(&ScheduleConfig::RoundRobin, TaskSet::FULL, 0).unwrap();
        let names: Vec<String> = (0..8).map(|_| s.next_task().to_string()).collect();
        assert_eq!(
            names,
            ["det", "sem", "driv", "lane", "det", "sem", "driv", "lane"]
        );
    }

    #[test]
    fn joint_is_all() {
        let mut s = Scheduler::new(&ScheduleConfig::Joint, TaskSet::FULL, 0).unwrap();
        assert_eq!(s.next_task(), Draw::All);
        assert_eq!(Draw::All.tasks(TaskSet::FULL), TaskSet::FULL);
    }

    #[test]
    fn reproducible_and_resumable() {
        let cfg = ScheduleConfig::Uniform;
        let mut a = Scheduler::new(&cfg, TaskSet::FULL, 9).unwrap();
        let seq: Vec<Draw> = (0..50).map(|_| a.next_task()).collect();
        let mut b = Scheduler::new(&cfg, TaskSet::FULL, 9).unwrap();
        b.step = 20;
        assert_eq!(b.next_task(), seq[20]);
        let c = Scheduler::new(&cfg, TaskSet::FULL, 10).unwrap();
        assert_ne!((0..50).map(|i| c.draw_at(i)).collect::<Vec<_>>(), seq);
    }

    #[test]
    fn rejects_bad_budgets() {
        assert!(Scheduler::weighted(vec![TaskKind::Det], vec![-1.0], 0).is_err());
        assert!(
            Scheduler::weighted(vec![TaskKind::Det, TaskKind::Sem], vec![0.0, 0.0], 0).is_err()
        );
        assert!(Scheduler::new(&ScheduleConfig::Joint, TaskSet::EMPTY, 0).is_err());
    }
}
