#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution policy for data-parallel loops.
///
/// Every parallel loop in the crate writes per-item results into an indexed
/// buffer and reduces sequentially afterwards, so `Sequential` and `Parallel`
/// return identical bits. Without the `parallel` feature both run on the
/// calling thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `true` if this policy will actually fan out to a thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Evaluates `f(i)` for `i in 0..n` and collects in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps each element of a slice, preserving order.
    pub fn map_slice<S, T, F>(self, items: &[S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&S) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }
}

/// Configures the global rayon pool from `CANODEPTH_THREADS`, if set.
///
/// Returns the thread count that was requested, or `None` when the variable
/// is absent or unparsable.
pub fn init_threads_from_env() -> Option<usize> {
    let n = std::env::var("CANODEPTH_THREADS").ok()?.trim().parse::<usize>().ok()?;
    #[cfg(feature = "parallel")]
    {
        // a second call (e.g. from tests) fails harmlessly
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Some(n)
}
