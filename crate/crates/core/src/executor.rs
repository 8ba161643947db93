//! Deterministic execution of independent cell tasks on a fixed number of
//! workers.
//!
//! Cells are assigned to workers as contiguous id blocks and results are
//! merged in id order, so the outcome is bit-identical for any worker count
//! and any completion order. With one worker no threads are spawned and the
//! tasks run strictly sequentially in id order.

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicBool, Ordering};

/// Contiguous id range for worker `w` out of `workers` over `tasks` ids.
fn block(w: usize, workers: usize, tasks: usize) -> (usize, usize) {
    let base = tasks / workers;
    let rem = tasks % workers;
    let start = w * base + w.min(rem);
    let len = base + usize::from(w < rem);
    (start, len)
}

/// Run `tasks` independent jobs and return all results ordered by task id.
/// No cancellation: every task runs.
pub fn run_batch<T, F>(workers: usize, tasks: usize, job: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 || tasks <= 1 {
        return (0..tasks).map(&job).collect();
    }
    let workers = workers.min(tasks);
    let mut slots: Vec<Option<Result<T>>> = (0..tasks).map(|_| None).collect();
    std::thread::scope(|scope| {
        let job = &job;
        let mut rest = slots.as_mut_slice();
        for w in 0..workers {
            let (start, len) = block(w, workers, tasks);
            let (mine, tail) = rest.split_at_mut(len);
            rest = tail;
            scope.spawn(move || {
                for (k, slot) in mine.iter_mut().enumerate() {
                    *slot = Some(job(start + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled its block")).collect()
}

/// Run `tasks` jobs, cancel scheduling of not-yet-started tasks after a
/// failure, and either return all results ordered by id or surface the
/// failure with the lowest task id among those observed.
pub fn run_batch_collect<T, F>(workers: usize, tasks: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 || tasks <= 1 {
        let mut out = Vec::with_capacity(tasks);
        for id in 0..tasks {
            out.push(job(id)?);
        }
        return Ok(out);
    }
    let workers = workers.min(tasks);
    let mut slots: Vec<Option<Result<T>>> = (0..tasks).map(|_| None).collect();
    let cancelled = AtomicBool::new(false);
    std::thread::scope(|scope| {
        let job = &job;
        let cancelled = &cancelled;
        let mut rest = slots.as_mut_slice();
        for w in 0..workers {
            let (start, len) = block(w, workers, tasks);
            let (mine, tail) = rest.split_at_mut(len);
            rest = tail;
            scope.spawn(move || {
                for (k, slot) in mine.iter_mut().enumerate() {
                    if cancelled.load(Ordering::Relaxed) {
                        break;
                    }
                    let r = job(start + k);
                    if r.is_err() {
                        cancelled.store(true, Ordering::Relaxed);
                    }
                    *slot = Some(r);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(tasks);
    let mut first_err: Option<Error> = None;
    for slot in slots {
        match slot {
            Some(Ok(v)) => out.push(v),
            Some(Err(e)) => {
                first_err = Some(e);
                break;
            }
            None => {
                first_err.get_or_insert(Error::Inconsistent(
                    "task skipped after batch cancellation".into(),
                ));
                break;
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_ordered_results_across_worker_counts() {
        let job = |id: usize| -> Result<usize> { Ok(id * id + 3) };
        let expect: Vec<usize> = (0..4).map(|id| id * id + 3).collect();
        for workers in [1, 2, 4, 7] {
            let got = run_batch_collect(workers, 4, job).unwrap();
            assert_eq!(got, expect, "workers = {workers}");
        }
    }

    #[test]
    fn single_failure_has_deterministic_identity() {
        let job = |id: usize| -> Result<usize> {
            if id == 5 {
                Err(Error::Validation(format!("task {id} failed")))
            } else {
                Ok(id)
            }
        };
        let mut messages = Vec::new();
        for workers in [1, 2, 4, 8] {
            let err = run_batch_collect(workers, 8, job).unwrap_err();
            messages.push(err.to_string());
        }
        assert!(messages.iter().all(|m| m == &messages[0]), "{messages:?}");
        assert!(messages[0].contains("task 5"));
    }

    #[test]
    fn run_batch_keeps_every_result() {
        let job = |id: usize| -> Result<usize> {
            if id % 2 == 0 {
                Err(Error::Validation(format!("even {id}")))
            } else {
                Ok(id)
            }
        };
        let all = run_batch(3, 6, job);
        assert_eq!(all.len(), 6);
        for (id, r) in all.iter().enumerate() {
            assert_eq!(r.is_err(), id % 2 == 0);
        }
    }

    #[test]
    fn block_assignment_covers_everything_contiguously() {
        for tasks in [1usize, 5, 8, 13] {
            for workers in [1usize, 2, 3, 4, 13] {
                let w = workers.min(tasks);
                let mut next = 0;
                for i in 0..w {
                    let (start, len) = block(i, w, tasks);
                    assert_eq!(start, next);
                    next += len;
                }
                assert_eq!(next, tasks);
            }
        }
    }

    #[test]
    fn more_workers_than_tasks() {
        let got = run_batch_collect(16, 3, |id| Ok(id)).unwrap();
        assert_eq!(got, vec![0, 1, 2]);
    }
}
