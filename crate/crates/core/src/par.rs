//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled these fan work out over rayon; without
//! it they run the same closures in order. Every helper computes each output
//! element with the same closure and the same operation order, so results are
//! bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar multiply-adds a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
pub(crate) const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Fill `out` row by row, where each row has `width` entries.
pub(crate) fn for_each_row<F>(out: &mut [f64], width: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= MIN_PARALLEL_WORK {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    out.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Map `f` over `0..n` and collect in index order.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
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

/// Run two closures, concurrently when the `parallel` feature is on.
pub(crate) fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// Map `f` over `items` using at most `workers` threads, preserving order.
///
/// Used for independent training runs and sweep points; each item owns its
/// state, so the worker count never changes the results.
pub fn map_with_workers<I, T, F>(items: Vec<I>, workers: usize, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| items.into_par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    items.into_iter().map(f).collect()
}
