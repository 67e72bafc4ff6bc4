//! Fixed-size worker pool over indexed work items.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

/// `f(0..items)` on `workers` threads; results come back in index order, so
/// the output does not depend on scheduling.
pub fn map_indexed<T, F>(workers: usize, items: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, items.max(1));
    if workers == 1 {
        return (0..items).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..items).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items {
                    break;
                }
                let value = f(i);
                slots.lock().expect("worker panicked")[i] = Some(value);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|v| v.expect("every item ran"))
        .collect()
}

/// Like [`map_indexed`] but stops at the first error in index order.
pub fn try_map_indexed<T, E, F>(workers: usize, items: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    map_indexed(workers, items, f).into_iter().collect()
}
