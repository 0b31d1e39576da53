//! Ordered map over independent work items, parallel when the `parallel`
//! feature is enabled and more than one thread is requested.
//!
//! Output order always equals input order, so results do not depend on the
//! thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Sequential,
    /// Run on a dedicated pool with this many threads; `0` uses rayon's
    /// global pool.
    Parallel(usize),
}

impl Exec {
    /// `1` is sequential, `0` means "all cores".
    pub fn from_jobs(jobs: usize) -> Self {
        match jobs {
            1 => Exec::Sequential,
            n => Exec::Parallel(n),
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && matches!(self, Exec::Parallel(_))
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel(0) => items.par_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel(n) => match rayon::ThreadPoolBuilder::new().num_threads(*n).build() {
                Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
                Err(_) => items.par_iter().map(f).collect(),
            },
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel(_) => items.iter().map(f).collect(),
        }
    }

    /// Like [`Exec::map`] over the index range `0..n`.
    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        let idx: Vec<usize> = (0..n).collect();
        self.map(&idx, |&i| f(i))
    }
}
