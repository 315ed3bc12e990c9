//! Thread-pool executor for the core pipeline.

use bevloc_core::pipeline::Executor;
use rayon::prelude::*;

pub const THREADS_ENV: &str = "BEVLOC_THREADS";

/// Worker count: `BEVLOC_THREADS` if set to a positive integer, else the
/// requested count, else the number of processors.
pub fn resolve_threads(requested: Option<usize>) -> usize {
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok());
    env.filter(|&n| n > 0)
        .or(requested.filter(|&n| n > 0))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps over a dedicated rayon pool; results keep input order.
pub struct Parallel {
    pool: rayon::ThreadPool,
}

impl Parallel {
    pub fn new(threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("thread pool");
        Self { pool }
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Parallel {
    fn map<T, U, F>(&self, items: Vec<T>, f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> U + Sync + Send,
    {
        self.pool.install(|| items.into_par_iter().map(f).collect())
    }
}
