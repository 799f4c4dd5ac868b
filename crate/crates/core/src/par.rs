//! Parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the `*_chunks` functions fan
//! out over rayon; without it they run the same body in a plain loop. Each
//! chunk is written by exactly one closure invocation and reductions happen
//! outside these helpers in a fixed order, so both paths produce bitwise
//! identical results. The `seq_*` twins always run sequentially and exist so
//! benchmarks can compare the two paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to equally sized mutable chunks of `out`, indexed from 0.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Sequential twin of [`for_each_chunk`].
pub fn seq_for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Fill `out[i]` with `f(i)` for independent per-element work.
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    out.par_iter_mut()
        .enumerate()
        .for_each(|(i, slot)| *slot = f(i));
    #[cfg(not(feature = "parallel"))]
    out.iter_mut()
        .enumerate()
        .for_each(|(i, slot)| *slot = f(i));
}

/// Sequential twin of [`fill_indexed`].
pub fn seq_fill_indexed<T, F>(out: &mut [T], f: F)
where
    F: Fn(usize) -> T,
{
    out.iter_mut()
        .enumerate()
        .for_each(|(i, slot)| *slot = f(i));
}

/// Build a vector whose element `i` is `f(i)`, preserving index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_indexed`].
pub fn seq_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
