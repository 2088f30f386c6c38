//! Worker-pool setup honoring the CTNAS_THREADS cap.

use std::sync::Once;

static INIT: Once = Once::new();

/// Initialize the global rayon pool once, capping threads at `CTNAS_THREADS`
/// when the variable is set to a positive integer. Later calls are no-ops, as
/// are calls made after some other code already built the global pool.
pub fn init_thread_pool() {
    INIT.call_once(|| {
        if let Ok(v) = std::env::var("CTNAS_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    // Ignore the error: the pool may already exist, in which
                    // case the cap cannot be applied retroactively.
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}

/// Number of worker threads the kernels will use.
pub fn worker_count() -> usize {
    rayon::current_num_threads()
}
