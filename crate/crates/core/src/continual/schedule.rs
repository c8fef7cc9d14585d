//! `NpM` class-incremental schedules: the first task holds the first `N`
//! classes of the class order, each later task the next `M`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A parsed `NpM` scenario name such as `15p1` or `4p4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub first: usize,
    pub step: usize,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("scenario `{s}` is not of the form NpM (e.g. 10p10)"));
        let (n, m) = s.trim().split_once('p').ok_or_else(bad)?;
        let first: usize = n.parse().map_err(|_| bad())?;
        let step: usize = m.parse().map_err(|_| bad())?;
        if first == 0 || step == 0 {
            return Err(bad());
        }
        Ok(Scenario { first, step })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}p{}", self.first, self.step)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub scenario: Scenario,
    pub class_order: Vec<usize>,
    pub tasks: Vec<BTreeSet<usize>>,
    /// Trailing classes that do not fill a whole task.
    pub excluded: Vec<usize>,
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks `0..task`.
    pub fn classes_before(&self, task: usize) -> BTreeSet<usize> {
        self.tasks[..task].iter().flatten().copied().collect()
    }

    /// Classes of tasks `0..=task`.
    pub fn classes_up_to(&self, task: usize) -> BTreeSet<usize> {
        self.tasks[..=task].iter().flatten().copied().collect()
    }
}

/// Builds the schedule over `class_order` (identity when `None`).
pub fn build_schedule(
    num_classes: usize,
    scenario: Scenario,
    class_order: Option<Vec<usize>>,
) -> Result<TaskSchedule> {
    let Scenario { first, step } = scenario;
    if first == 0 || step == 0 {
        return Err(Error::config("N and M must be ≥ 1"));
    }
    if first > num_classes {
        return Err(Error::config(format!(
            "first task has {first} classes but only {num_classes} exist"
        )));
    }
    let order = class_order.unwrap_or_else(|| (0..num_classes).collect());
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (0..num_classes).collect::<Vec<_>>() {
        return Err(Error::config(format!(
            "class order must be a permutation of 0..{num_classes}"
        )));
    }
    let later = (num_classes - first) / step;
    let mut tasks = vec![order[..first].iter().copied().collect::<BTreeSet<_>>()];
    for i in 0..later {
        let start = first + i * step;
        tasks.push(order[start..start + step].iter().copied().collect());
    }
    let used = first + later * step;
    let excluded = order[used..].to_vec();
    if !excluded.is_empty() {
        log::warn!("scenario {scenario} leaves classes {excluded:?} out of every task");
    }
    Ok(TaskSchedule {
        scenario,
        class_order: order,
        tasks,
        excluded,
    })
}
