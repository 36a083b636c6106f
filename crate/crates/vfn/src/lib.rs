//! Filesystem, training orchestration and benchmarking on top of
//! `vfn-core`.

pub mod bench;
pub mod dataset;
mod error;
pub mod io;
pub mod scorer;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use vfn_core as core;

/// Environment variable bounding worker threads.
pub const THREADS_ENV: &str = "VFN_THREADS";

/// Sizes the global rayon pool from `VFN_THREADS` when set. Returns the
/// thread count in effect.
pub fn init_thread_pool() -> Result<usize> {
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Invalid(format!("{THREADS_ENV}={raw:?} is not a positive integer"))
        })?;
        // A pool built earlier in the process wins; that is harmless here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(rayon::current_num_threads())
}
