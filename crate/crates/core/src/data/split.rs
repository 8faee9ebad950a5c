//! Split manifests for the three labeling settings, and their JSON-lines
//! file format.
//!
//! File layout: a header line `{"setting": ..., "sem_fraction": ...}` followed
//! by one record per sample, `{"id": str, "tasks": [str]}`, with an optional
//! `"pseudo": [str]` listing tasks whose labels come from a teacher.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tasks::{PerTask, TaskKind, TaskSet, NUM_TASKS};

/// Per-task labeled-image ratio OD:SS:DA:LD of the disjoint-normal setting.
pub const DISJOINT_NORMAL_RATIO: [usize; NUM_TASKS] = [10, 7, 20, 20];
pub const DEFAULT_SEM_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitSetting {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "disjoint-normal")]
    DisjointNormal,
    #[serde(rename = "disjoint-balance")]
    DisjointBalance,
}

impl SplitSetting {
    pub fn name(self) -> &'static str {
        match self {
            SplitSetting::Full => "full",
            SplitSetting::DisjointNormal => "disjoint-normal",
            SplitSetting::DisjointBalance => "disjoint-balance",
        }
    }

    pub fn is_disjoint(self) -> bool {
        !matches!(self, SplitSetting::Full)
    }

    /// Smallest sample count for which the setting's ratios are representable.
    pub fn min_samples(self) -> usize {
        match self {
            SplitSetting::Full => 1,
            SplitSetting::DisjointNormal => DISJOINT_NORMAL_RATIO.iter().sum(),
            SplitSetting::DisjointBalance => NUM_TASKS,
        }
    }
}

impl fmt::Display for SplitSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SplitSetting::Full),
            "disjoint-normal" => Ok(SplitSetting::DisjointNormal),
            "disjoint-balance" => Ok(SplitSetting::DisjointBalance),
            other => Err(Error::Config(format!("unknown split setting `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Tasks with real labels.
    pub tasks: TaskSet,
    /// Tasks filled in by pseudo labeling.
    pub pseudo: TaskSet,
}

impl ManifestEntry {
    /// Labels usable for training: real, plus pseudo when enabled.
    pub fn available(&self, use_pseudo: bool) -> TaskSet {
        if use_pseudo {
            self.tasks.union(self.pseudo)
        } else {
            self.tasks
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub setting: SplitSetting,
    pub sem_fraction: f64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    setting: SplitSetting,
    sem_fraction: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    id: String,
    tasks: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pseudo: Vec<String>,
}

/// Hamilton (largest remainder) apportionment of `n` over integer weights;
/// ties go to the earlier index.
fn apportion(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| n * w / total).collect();
    let mut rems: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (n * w % total, i))
        .collect();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = n - counts.iter().sum::<usize>();
    for &(_, i) in rems.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

/// Build a split manifest over ids `scene_00000000 .. scene_{n-1}`.
pub fn build_split(setting: SplitSetting, n_samples: usize, seed: u64) -> Result<SplitManifest> {
    build_split_with(setting, n_samples, seed, DEFAULT_SEM_FRACTION)
}

pub fn build_split_with(
    setting: SplitSetting,
    n_samples: usize,
    seed: u64,
    sem_fraction: f64,
) -> Result<SplitManifest> {
    let ids: Vec<String> = (0..n_samples as u64)
        .map(crate::data::synth::scene_id)
        .collect();
    build_split_for_ids(setting, &ids, seed, sem_fraction)
}

pub fn build_split_for_ids(
    setting: SplitSetting,
    ids: &[String],
    seed: u64,
    sem_fraction: f64,
) -> Result<SplitManifest> {
    let n = ids.len();
    let min = setting.min_samples();
    if n < min {
        return Err(Error::Config(format!(
            "{setting} needs at least {min} samples, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&sem_fraction) {
        return Err(Error::Config(format!(
            "sem_fraction {sem_fraction} outside [0,1]"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut labels = vec![TaskSet::EMPTY; n];
    match setting {
        SplitSetting::Full => {
            let n_sem = (sem_fraction * n as f64).round() as usize;
            for (rank, &i) in order.iter().enumerate() {
                labels[i] = [TaskKind::Det, TaskKind::Driv, TaskKind::Lane]
                    .into_iter()
                    .collect();
                if rank < n_sem {
                    labels[i].insert(TaskKind::Sem);
                }
            }
        }
        SplitSetting::DisjointNormal | SplitSetting::DisjointBalance => {
            let weights = if setting == SplitSetting::DisjointNormal {
                DISJOINT_NORMAL_RATIO.to_vec()
            } else {
                vec![1; NUM_TASKS]
            };
            let counts = apportion(n, &weights);
            let mut cursor = order.iter();
            for (t, &c) in TaskKind::ALL.iter().zip(&counts) {
                for &i in cursor.by_ref().take(c) {
                    labels[i] = TaskSet::single(*t);
                }
            }
        }
    }
    let entries = ids
        .iter()
        .zip(labels)
        .map(|(id, tasks)| ManifestEntry {
            id: id.clone(),
            tasks,
            pseudo: TaskSet::EMPTY,
        })
        .collect();
    Ok(SplitManifest {
        setting,
        sem_fraction,
        entries,
    })
}

impl SplitManifest {
    /// Number of samples with real labels per task.
    pub fn counts(&self) -> PerTask<usize> {
        let mut c = PerTask::splat(0);
        for e in &self.entries {
            for t in e.tasks.iter() {
                c[t] += 1;
            }
        }
        c
    }

    pub fn labeled_ids(&self, task: TaskKind) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.tasks.contains(task))
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Check that no sample carries real labels for two tasks.
    pub fn audit_disjoint(&self) -> Result<()> {
        for e in &self.entries {
            if e.tasks.len() > 1 {
                return Err(Error::Invalid(format!(
                    "sample {} labeled for {:?} in a disjoint setting",
                    e.id,
                    e.tasks.names()
                )));
            }
        }
        Ok(())
    }

    /// Tasks that some sample lacks a real label for.
    pub fn gapped_tasks(&self) -> TaskSet {
        TaskKind::ALL
            .into_iter()
            .filter(|t| self.entries.iter().any(|e| !e.tasks.contains(*t)))
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&HeaderRecord {
            setting: self.setting,
            sem_fraction: self.sem_fraction,
        })?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&EntryRecord {
                id: e.id.clone(),
                tasks: e.tasks.names(),
                pseudo: e.pseudo.names(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes())
    }

    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self> {
        let mut header: Option<HeaderRecord> = None;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: lineno, msg };
            if header.is_none() {
                header = Some(
                    serde_json::from_str(&line).map_err(|e| perr(format!("bad header: {e}")))?,
                );
                continue;
            }
            let rec: EntryRecord = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
            let parse_set = |names: &[String]| -> Result<TaskSet> {
                names
                    .iter()
                    .map(|n| {
                        n.parse::<TaskKind>()
                            .map_err(|_| perr(format!("unknown task name `{n}`")))
                    })
                    .collect()
            };
            entries.push(ManifestEntry {
                tasks: parse_set(&rec.tasks)?,
                pseudo: parse_set(&rec.pseudo)?,
                id: rec.id,
            });
        }
        let header = header.ok_or(Error::Parse {
            line: 0,
            msg: "empty manifest".into(),
        })?;
        Ok(SplitManifest {
            setting: header.setting,
            sem_fraction: header.sem_fraction,
            entries,
        })
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }
}

pub fn write_manifest(manifest: &SplitManifest, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(manifest.to_jsonl()?.as_bytes())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    SplitManifest::from_reader(std::fs::File::open(path)?)
}
