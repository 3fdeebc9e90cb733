//! Read-only fan-out over fixed-size shards with results in shard order.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "LYAPNET_THREADS";

/// Worker count: `LYAPNET_THREADS` if set to a positive integer, otherwise
/// the available parallelism.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(n) if n > 0 => n,
        _ => avail,
    }
}

/// Splits `0..len` into shards of `shard` items and evaluates `f` on each.
///
/// Shard boundaries depend only on `len` and `shard`, never on the worker
/// count, so results are identical however many threads run. The first
/// error in shard order is returned.
pub fn map_shards<T, F>(len: usize, shard: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync,
{
    let shard = shard.max(1);
    let ranges: Vec<Range<usize>> = (0..len)
        .step_by(shard)
        .map(|s| s..(s + shard).min(len))
        .collect();
    let workers = worker_count().min(ranges.len());
    if workers <= 1 {
        return ranges.into_iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..ranges.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= ranges.len() {
                            break;
                        }
                        done.push((i, f(ranges[i].clone())));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every shard is evaluated"))
        .collect()
}
