//! Data-parallel inner loops with a sequential fallback.
//!
//! With the `parallel` feature (default) these helpers run on rayon; without
//! it they degrade to plain loops. Every helper is written so the result is
//! bit-identical either way: work is partitioned by index into disjoint
//! output slots and any reduction is re-summed in index order, never in
//! thread-completion order. The sequential bodies double as the reference
//! implementations benchmarked against the parallel ones in
//! `benches/parallel_vs_sequential.rs`.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of scalar operations before a loop is worth parallelizing.
/// Below this the rayon dispatch overhead dominates on small kernels.
pub const PAR_THRESHOLD: usize = 16_384;

/// Apply `f` to equal-length chunks of `data` (the last may be shorter),
/// passing the chunk index. `work_hint` is the approximate total scalar-op
/// count used to decide whether to go parallel.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, work_hint: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    {
        if work_hint >= PAR_THRESHOLD {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work_hint;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Map `f` over `0..n` into a fresh vector, preserving index order.
pub fn map_indexed<U, F>(n: usize, work_hint: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if work_hint >= PAR_THRESHOLD && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work_hint;
    (0..n).map(f).collect()
}

/// Run `f` on every element of `items`, each receiving its index. Used for
/// per-block training workers: the closures own disjoint state.
pub fn for_each_indexed_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
        return;
    }
    #[cfg(not(feature = "parallel"))]
    for (i, t) in items.iter_mut().enumerate() {
        f(i, t);
    }
}

/// True when the parallel feature is compiled in.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Cap the rayon worker count from the `DIFFBLOCKS_THREADS` env var.
///
/// Must be called before any rayon work is dispatched; later calls are
/// ignored by rayon. A no-op in sequential builds or when the var is unset.
pub fn init_thread_cap_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("DIFFBLOCKS_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}
