//! Execution policy for data-parallel loops.
//!
//! Every parallel loop in the crate writes disjoint outputs and performs its
//! reductions in a fixed order, so [`Exec::Parallel`] and [`Exec::Sequential`]
//! give bit-identical results. Without the `parallel` feature the parallel
//! policy silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Whether this policy actually runs on the rayon pool in the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Calls `f(row_index, row)` for each `row_len`-sized chunk of `data`.
    pub fn for_each_row<T, F>(self, data: &mut [T], row_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if row_len == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            data.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
        data.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }

    /// Maps `f` over `0..n`, keeping output order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}
