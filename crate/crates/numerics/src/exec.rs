//! Execution mode for the data-parallel kernels.
//!
//! Every parallel loop in this crate writes disjoint output slices and
//! reduces partial results in a fixed chunk order, so `Parallel` and
//! `Sequential` produce bitwise-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise runs
    /// sequentially.
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Calls `f(index, chunk)` for each `chunk_len`-sized chunk of `data`.
    pub fn for_each_chunk<T, F>(self, data: &mut [T], chunk_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk_len == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Same as [`Exec::for_each_chunk`] over two buffers chunked in lockstep.
    pub fn for_each_chunk2<A, B, F>(self, a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
    where
        A: Send,
        B: Send,
        F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
    {
        if a_len == 0 || b_len == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            a.par_chunks_mut(a_len)
                .zip(b.par_chunks_mut(b_len))
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y));
            return;
        }
        a.chunks_mut(a_len)
            .zip(b.chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
    }

    /// Maps `0..n` to a vector, preserving index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}
