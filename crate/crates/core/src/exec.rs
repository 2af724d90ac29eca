//! Data-parallel execution with a sequential fallback.
//!
//! Batch-level loops (per-example gradients, Monte Carlo sampling) are
//! expressed as index maps. With the `parallel` feature they fan out over a
//! rayon pool; without it, or with `workers == 1`, they run sequentially.
//! Results always come back in index order, so thread count never changes
//! numerics: reductions downstream fold in a fixed order.

/// Maps `f` over `0..n` and returns results in index order.
///
/// `workers == 1` forces the sequential path; `workers == 0` uses the
/// default rayon pool size; any other value builds a pool of that size.
/// Without the `parallel` feature every value of `workers` is sequential.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if workers != 1 {
            use rayon::prelude::*;
            let run = || (0..n).into_par_iter().map(&f).collect();
            return match workers {
                0 => run(),
                w => rayon::ThreadPoolBuilder::new()
                    .num_threads(w)
                    .build()
                    .expect("rayon pool")
                    .install(run),
            };
        }
    }
    let _ = workers;
    map_indexed_seq(n, f)
}

/// Always-sequential variant, kept public so benches can compare paths.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// True when the parallel path is compiled in.
pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}
