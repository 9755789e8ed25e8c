//! Thread-pool executor for the core's ordered map.

use igpo_core::train::Executor;
use rayon::prelude::*;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "IGPO_FORGE_THREADS";

/// Runs maps on a dedicated rayon pool. Results keep input order, so the
/// thread count never changes an output.
pub struct RayonExec {
    pool: rayon::ThreadPool,
}

impl RayonExec {
    pub fn new(threads: Option<usize>) -> anyhow::Result<Self> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n.max(1));
        }
        Ok(RayonExec { pool: builder.build()? })
    }

    /// Pool sized by [`THREADS_ENV`], or rayon's default when unset.
    pub fn from_env() -> anyhow::Result<Self> {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got `{v}`"))?,
            ),
            Err(_) => None,
        };
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for RayonExec {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}
