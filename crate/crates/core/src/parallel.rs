//! Thread-pool configuration.
//!
//! Kernels split work over independent batch items and reduce partial results
//! in a fixed order, so results do not depend on the number of threads.

use std::sync::OnceLock;

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "CDNZ_THREADS";

static CONFIGURED: OnceLock<usize> = OnceLock::new();

/// Reads [`THREADS_ENV`]; `None` when unset or unparsable.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Configures the global pool once. Later calls return the first setting.
///
/// `deterministic` forces a single worker so that even scheduling is fixed.
pub fn init(threads: Option<usize>, deterministic: bool) -> usize {
    *CONFIGURED.get_or_init(|| {
        let n = if deterministic {
            1
        } else {
            threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        };
        // The pool may already exist if a caller touched rayon first; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        rayon::current_num_threads()
    })
}
