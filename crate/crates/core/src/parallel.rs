//! Data-parallel execution helpers.
//!
//! With the `parallel` feature, row- and batch-level loops run on rayon's pool.
//! Without it (or after `set_parallel(false)`) the same closures run
//! sequentially. Each chunk is written by exactly one closure invocation, so
//! results are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

// Below this much work per call, rayon's fork/join overhead dominates.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 16 * 1024;

/// Toggles rayon dispatch at runtime. No effect without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

/// Whether kernels will dispatch to rayon.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

#[cfg(feature = "parallel")]
#[inline]
fn go_parallel(work: usize) -> bool {
    parallel_enabled() && work >= MIN_PARALLEL_WORK
}

/// Runs `f(chunk_index, chunk)` over `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if go_parallel(data.len()) {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk`] but walks two buffers in lock step.
pub fn for_each_chunk_pair<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Send + Sync,
{
    if a_len == 0 || b_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if go_parallel(a.len() + b.len()) {
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

/// Maps `0..n` through `f`, preserving order. `work` is an estimate of the
/// total cost in scalar operations, used to decide whether to fan out.
pub fn map_range<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if go_parallel(work) {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_writes_match_sequential() {
        let mut a = vec![0u64; 100_000];
        for_each_chunk(&mut a, 1000, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 1000 + j) as u64;
            }
        });
        assert!(a.iter().enumerate().all(|(i, &v)| v == i as u64));
    }

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(50_000, usize::MAX, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }
}
