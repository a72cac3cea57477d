//! Thread fan-out for per-sample work.

use std::num::NonZeroUsize;

use dcat_core::train::Executor;

use crate::error::{AppError, AppResult};

pub const THREADS_ENV: &str = "DCAT_THREADS";

/// Splits jobs into contiguous chunks, one scoped thread per chunk, and
/// returns results in job order, so the output does not depend on the
/// thread count.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    threads: NonZeroUsize,
}

impl Threaded {
    pub fn new(threads: NonZeroUsize) -> Self {
        Self { threads }
    }

    /// Reads `DCAT_THREADS`; unset means one thread.
    pub fn from_env() -> AppResult<Self> {
        match std::env::var(THREADS_ENV) {
            Err(_) => Ok(Self::new(NonZeroUsize::MIN)),
            Ok(v) => v
                .trim()
                .parse::<NonZeroUsize>()
                .map(Self::new)
                .map_err(|_| AppError::config(format!("{THREADS_ENV}: expected a positive integer, got '{v}'"))),
        }
    }

    pub fn threads(&self) -> usize {
        self.threads.get()
    }
}

impl Executor for Threaded {
    fn run<R: Send>(&self, n: usize, job: &(dyn Fn(usize) -> R + Sync)) -> Vec<R> {
        let t = self.threads.get().min(n);
        if t <= 1 {
            return (0..n).map(job).collect();
        }
        let chunk = n.div_ceil(t);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(job).collect::<Vec<R>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker thread panicked"))
                .collect()
        })
    }
}
