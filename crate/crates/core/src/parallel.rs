//! Order-preserving fan-out over scoped threads.

use std::thread;

/// Evaluates `f(0..n)` on up to `workers` threads and returns the results
/// in index order. The first error (by index) wins.
pub fn map_indexed<T, E, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Vec<Result<T, E>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let range = (w * chunk)..((w + 1) * chunk).min(n);
                s.spawn(move || range.map(f).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    parts.into_iter().flatten().collect()
}
