//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) the maps below run on the current
//! rayon pool; without it they fall back to plain iterators. Both paths return
//! results in index order, so any reduction done by the caller afterwards is
//! independent of the degree of parallelism.

/// Sequential implementations, always compiled.
pub mod sequential {
    /// Evaluates `f(0), f(1), ..., f(n - 1)` on the calling thread.
    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }

    pub fn map_slice<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(usize, &'a S) -> T + Sync + Send,
    {
        items.iter().enumerate().map(|(i, s)| f(i, s)).collect()
    }
}

/// Rayon-backed implementations.
#[cfg(feature = "parallel")]
pub mod parallel {
    use rayon::prelude::*;

    /// Evaluates `f(0), ..., f(n - 1)` on the rayon pool, collecting in order.
    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    pub fn map_slice<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(usize, &'a S) -> T + Sync + Send,
    {
        items.par_iter().enumerate().map(|(i, s)| f(i, s)).collect()
    }
}

#[cfg(feature = "parallel")]
pub use parallel::{map_indexed, map_slice};
#[cfg(not(feature = "parallel"))]
pub use sequential::{map_indexed, map_slice};

/// Number of worker threads the maps above will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
