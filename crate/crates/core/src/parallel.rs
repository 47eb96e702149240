//! Worker-thread control. Every parallel section runs inside a pool sized
//! by `HTK_THREADS` (default 1), and results are always collected in input
//! order so the thread count never changes an output.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "HTK_THREADS";

/// Thread count requested through the environment.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs `f` on a pool sized from the environment.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    with_threads(thread_count()?, f)
}
