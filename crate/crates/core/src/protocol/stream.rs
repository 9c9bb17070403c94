use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::data::{Dataset, Split};
use crate::diffcore::{seeded_rng, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// Sorted class ids of this task.
    pub label_set: Vec<usize>,
    /// Row indices into the dataset.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Counts of data reads, split by whether the protocol allowed them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    pub train_reads: usize,
    pub test_reads: usize,
    /// Training rows of a task other than the current one, or test rows of a
    /// task not yet reached.
    pub forbidden_reads: usize,
}

/// Tasks with pairwise disjoint label sets over one dataset. Every data read
/// goes through [`TaskStream::train_rows`] or [`TaskStream::test_rows`] and
/// is checked against the current stage.
#[derive(Clone, Debug)]
pub struct TaskStream {
    dataset: Dataset,
    tasks: Vec<Task>,
    current: Option<usize>,
    log: AccessLog,
}

const PERMUTATION_SALT: u64 = 0x7461_736b;

/// Splits the classes of `dataset` into a base task of `base` classes and
/// tasks of `inc` classes each, after a seeded permutation of class ids.
pub fn split_stream(dataset: Dataset, base: usize, inc: usize, seed: u64) -> Result<TaskStream> {
    let c = dataset.num_classes();
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut seeded_rng(seed, PERMUTATION_SALT));
    if base == 0 || base > c {
        return Err(Error::Split {
            msg: format!("base task needs between 1 and {c} classes, got {base}"),
            leftover: vec![],
        });
    }
    let rest = c - base;
    if rest > 0 && (inc == 0 || !rest.is_multiple_of(inc)) {
        let keep = if inc == 0 { 0 } else { rest - rest % inc };
        let mut leftover = order[base + keep..].to_vec();
        leftover.sort_unstable();
        return Err(Error::Split {
            msg: format!("{c} classes do not split into B{base}Inc{inc}"),
            leftover,
        });
    }
    let mut groups = vec![order[..base].to_vec()];
    groups.extend(order[base..].chunks(inc.max(1)).map(<[usize]>::to_vec));
    let tasks = groups
        .into_iter()
        .map(|mut label_set| {
            label_set.sort_unstable();
            let rows = |split| label_set.iter().flat_map(|&k| dataset.indices(k, split)).collect();
            Task {
                train: rows(Split::Train),
                test: rows(Split::Test),
                label_set: label_set.clone(),
            }
        })
        .collect();
    Ok(TaskStream {
        dataset,
        tasks,
        current: None,
        log: AccessLog::default(),
    })
}

impl TaskStream {
    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.label_set.len()).sum()
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn current(&self) -> Option<usize> {
        self.current
    }

    pub fn access_log(&self) -> &AccessLog {
        &self.log
    }

    /// Moves to `task`. Stages only advance.
    pub fn enter(&mut self, task: usize) -> Result<()> {
        if task >= self.tasks.len() || self.current.is_some_and(|c| task <= c) {
            return Err(Error::Protocol(format!("cannot enter task {task} from {:?}", self.current)));
        }
        self.current = Some(task);
        Ok(())
    }

    /// True when label sets are pairwise disjoint and every row sits in its
    /// task's label set.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.tasks.iter().all(|t| {
            t.label_set.iter().all(|&k| seen.insert(k))
                && t.train
                    .iter()
                    .chain(&t.test)
                    .all(|&i| t.label_set.binary_search(&self.dataset.labels()[i]).is_ok())
        })
    }

    fn read(&mut self, rows: &[usize], allowed: bool) -> (Tensor, Vec<usize>) {
        if !allowed {
            self.log.forbidden_reads += rows.len();
        }
        let labels = rows.iter().map(|&i| self.dataset.labels()[i]).collect();
        (self.dataset.features().select_rows(rows), labels)
    }

    /// Training rows `rows` (indices into the dataset) of `task`.
    pub fn train_rows(&mut self, task: usize, rows: &[usize]) -> (Tensor, Vec<usize>) {
        self.log.train_reads += rows.len();
        let allowed = self.current == Some(task);
        self.read(rows, allowed)
    }

    /// The whole test set of `task`.
    pub fn test_rows(&mut self, task: usize) -> (Tensor, Vec<usize>) {
        let rows = self.tasks[task].test.clone();
        self.log.test_reads += rows.len();
        let allowed = self.current.is_some_and(|c| task <= c);
        self.read(&rows, allowed)
    }

    /// Union of the test sets of tasks `0..=current`.
    pub fn seen_test_set(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let current = self.current.ok_or_else(|| Error::Protocol("no task entered".into()))?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for t in 0..=current {
            let (x, y) = self.test_rows(t);
            rows.extend((0..x.rows()).map(|i| x.row(i).to_vec()));
            labels.extend(y);
        }
        Ok((Tensor::from_rows(&rows)?, labels))
    }
}
