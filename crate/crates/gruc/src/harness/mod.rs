//! Training, evaluation, and benchmark-generation harness.
//!
//! Everything here is deterministic given a seed: corpora are generated from
//! per-instance substreams, training shuffles and dropout draw from per-epoch
//! substreams, and parallel execution never changes results because outputs
//! are placed by input index and reductions run in input order.

pub mod eval;
pub mod sweep;
pub mod synthetic;
pub mod train;

use crate::error::{Error, Result};

/// Applies `f` to every item on up to `jobs` worker threads.
///
/// Results land at the index of their input, so the output is identical for
/// every `jobs` value; only wall time changes. Errors are reported for the
/// lowest failing index to keep that invariant.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }

    let mut slots: Vec<Option<Result<R>>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let shared = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= items.len() {
                        return;
                    }
                    let out = f(&items[i]);
                    let mut guard = shared.lock().expect("worker panicked holding slot lock");
                    guard[i] = Some(out);
                });
            }
        });
    }

    let mut results = Vec::with_capacity(items.len());
    for (i, slot) in slots.into_iter().enumerate() {
        match slot {
            Some(Ok(r)) => results.push(r),
            Some(Err(e)) => return Err(e),
            None => {
                return Err(Error::domain(
                    "parallel_map",
                    format!("item {i} produced no result"),
                ))
            }
        }
    }
    Ok(results)
}
