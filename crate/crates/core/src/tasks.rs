//! The four perception tasks and their fixed ordering.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// A perception task. The declaration order (det < sem < driv < lane) is the
/// canonical task index used by every per-task vector in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Det,
    Sem,
    Driv,
    Lane,
}

pub const NUM_TASKS: usize = 4;

/// Detection categories.
pub const K_DET: usize = 9;
/// Semantic segmentation categories.
pub const K_SEM: usize = 19;
/// Drivable-area categories (background included).
pub const K_DRIV: usize = 2;
/// Lane categories (foreground only; the head adds a background channel).
pub const K_LANE: usize = 1;

impl TaskKind {
    pub const ALL: [TaskKind; NUM_TASKS] =
        [TaskKind::Det, TaskKind::Sem, TaskKind::Driv, TaskKind::Lane];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TaskKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Det => "det",
            TaskKind::Sem => "sem",
            TaskKind::Driv => "driv",
            TaskKind::Lane => "lane",
        }
    }

    /// Number of prompt rows / labeled categories for the task.
    pub fn num_categories(self) -> usize {
        match self {
            TaskKind::Det => K_DET,
            TaskKind::Sem => K_SEM,
            TaskKind::Driv => K_DRIV,
            TaskKind::Lane => K_LANE,
        }
    }

    /// Output channels of the dense head for pixel tasks. Lane gets an extra
    /// background channel.
    pub fn seg_channels(self) -> usize {
        match self {
            TaskKind::Lane => K_LANE + 1,
            t => t.num_categories(),
        }
    }

    pub fn is_pixel_task(self) -> bool {
        !matches!(self, TaskKind::Det)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "det" => Ok(TaskKind::Det),
            "sem" => Ok(TaskKind::Sem),
            "driv" => Ok(TaskKind::Driv),
            "lane" => Ok(TaskKind::Lane),
            other => Err(Error::Parse {
                line: 0,
                msg: format!("unknown task name `{other}`"),
            }),
        }
    }
}

/// A small set of tasks, stored as a bitmask in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TaskSet(u8);

impl TaskSet {
    pub const EMPTY: TaskSet = TaskSet(0);
    pub const FULL: TaskSet = TaskSet(0b1111);

    pub fn single(t: TaskKind) -> Self {
        TaskSet(1 << t.index())
    }

    pub fn contains(self, t: TaskKind) -> bool {
        self.0 & (1 << t.index()) != 0
    }

    pub fn insert(&mut self, t: TaskKind) {
        self.0 |= 1 << t.index();
    }

    pub fn remove(&mut self, t: TaskKind) {
        self.0 &= !(1 << t.index());
    }

    pub fn union(self, other: TaskSet) -> TaskSet {
        TaskSet(self.0 | other.0)
    }

    pub fn intersection(self, other: TaskSet) -> TaskSet {
        TaskSet(self.0 & other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = TaskKind> {
        TaskKind::ALL.into_iter().filter(move |t| self.contains(*t))
    }

    pub fn names(self) -> Vec<String> {
        self.iter().map(|t| t.name().to_string()).collect()
    }
}

impl FromIterator<TaskKind> for TaskSet {
    fn from_iter<I: IntoIterator<Item = TaskKind>>(iter: I) -> Self {
        let mut s = TaskSet::EMPTY;
        for t in iter {
            s.insert(t);
        }
        s
    }
}

/// A fixed-size per-task array indexed by [`TaskKind`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerTask<T>(pub [T; NUM_TASKS]);

impl<T: Copy> PerTask<T> {
    pub fn splat(v: T) -> Self {
        PerTask([v; NUM_TASKS])
    }
}

impl<T> std::ops::Index<TaskKind> for PerTask<T> {
    type Output = T;
    fn index(&self, t: TaskKind) -> &T {
        &self.0[t.index()]
    }
}

impl<T> std::ops::IndexMut<TaskKind> for PerTask<T> {
    fn index_mut(&mut self, t: TaskKind) -> &mut T {
        &mut self.0[t.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_is_stable() {
        assert!(TaskKind::Det < TaskKind::Sem);
        assert!(TaskKind::Sem < TaskKind::Driv);
        assert!(TaskKind::Driv < TaskKind::Lane);
        for (i, t) in TaskKind::ALL.iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(t.name().parse::<TaskKind>().unwrap(), *t);
        }
    }

    #[test]
    fn category_counts() {
        let k: Vec<_> = TaskKind::ALL.iter().map(|t| t.num_categories()).collect();
        assert_eq!(k, vec![9, 19, 2, 1]);
        assert_eq!(TaskKind::Lane.seg_channels(), 2);
    }

    #[test]
    fn unknown_name_rejected() {
        assert!("depth".parse::<TaskKind>().is_err());
    }

    #[test]
    fn task_set_ops() {
        let mut s = TaskSet::single(TaskKind::Sem);
        s.insert(TaskKind::Lane);
        assert_eq!(s.len(), 2);
        assert_eq!(
            s.iter().collect::<Vec<_>>(),
            vec![TaskKind::Sem, TaskKind::Lane]
        );
        assert!(s.intersection(TaskSet::single(TaskKind::Det)).is_empty());
    }
}
