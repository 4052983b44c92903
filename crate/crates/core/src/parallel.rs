//! Order-preserving parallel map over index ranges.
//!
//! Every result depends only on its own index, so the output is identical for
//! any worker count.

use crate::error::Result;

/// Evaluates `f(0..n)` on up to `workers` scoped threads and returns the
/// results in index order. The first error (by index) wins.
pub fn par_map<R, F>(n: usize, workers: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let per = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Vec<Result<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = (w * per).min(n);
                let hi = ((w + 1) * per).min(n);
                scope.spawn(move || (lo..hi).map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    parts.into_iter().flatten().collect()
}

/// Resolves a requested worker count; 0 means "all available cores".
pub fn resolve_workers(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}
