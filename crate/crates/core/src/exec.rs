//! Bounded worker pool with order-preserving reduction.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

/// Evaluates `f(0..n)` on up to `workers` threads and returns results in
/// index order. Output is identical for any worker count; only wall time
/// changes.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }

    let counter = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, T)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let counter = &counter;
            let f = &f;
            scope.spawn(move || loop {
                let idx = counter.fetch_add(1, Ordering::Relaxed);
                if idx >= n {
                    break;
                }
                if tx.send((idx, f(idx))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
        for (idx, value) in rx {
            slots[idx] = Some(value);
        }
        slots
            .into_iter()
            .map(|s| s.expect("every index is produced exactly once"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_for_any_worker_count() {
        let square = |i: usize| i * i;
        let serial = parallel_map(100, 1, square);
        for workers in [2, 4, 7] {
            assert_eq!(parallel_map(100, workers, square), serial);
        }
    }

    #[test]
    fn handles_empty_input() {
        let out: Vec<usize> = parallel_map(0, 4, |i| i);
        assert!(out.is_empty());
    }
}
