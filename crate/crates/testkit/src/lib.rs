//! Oracles and randomized instance generators used by the test suites.
//!
//! Everything here is deliberately independent of the production code paths
//! it checks: dense factorizations instead of iterative solvers, global
//! graph walks instead of packed exchanges, sequential replay instead of
//! scheduled execution. Generators take explicit RNGs so failures replay
//! from a seed.

pub mod dense;
pub mod forest;
pub mod instances;
pub mod programs;

use std::time::Duration;

/// Runs `f` on a helper thread and panics if it does not finish in `limit`.
/// Used to turn a scheduler deadlock into a test failure instead of a hang.
pub fn with_watchdog<T, F>(limit: Duration, f: F) -> T
where
    T: Send + 'static,
    F: FnOnce() -> T + Send + 'static,
{
    let (tx, rx) = std::sync::mpsc::channel();
    let worker = std::thread::spawn(move || {
        let _ = tx.send(f());
    });
    match rx.recv_timeout(limit) {
        Ok(value) => {
            let _ = worker.join();
            value
        }
        Err(_) => panic!("watchdog expired after {limit:?}: worker is stuck"),
    }
}
