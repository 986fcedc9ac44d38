//! Thread-pool initialisation.
//!
//! Parallelism is only ever applied to *independent* work items whose results
//! are collected back in input order, so the thread count changes wall-clock
//! time but never output bytes. `ODIP_THREADS` caps the pool for constrained
//! machines; unset or invalid values fall back to the rayon default.

use std::sync::OnceLock;

static POOL_INIT: OnceLock<()> = OnceLock::new();

/// Environment variable that caps the worker pool size.
pub const THREADS_ENV: &str = "ODIP_THREADS";

/// Installs the global rayon pool, honouring `ODIP_THREADS` when it parses as
/// a positive integer. Safe to call repeatedly; only the first call matters.
/// Returns the thread count in effect.
pub fn init_thread_pool() -> usize {
    POOL_INIT.get_or_init(|| {
        if let Some(n) = requested_threads() {
            // Ignore the error: a pool already built (e.g. by an embedding
            // test harness) is fine, we only lose the cap.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
    rayon::current_num_threads()
}

fn requested_threads() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => None,
    }
}
