//! Data-parallel map helpers. With the `parallel` feature (default) the
//! work fans out over rayon; without it the same API runs sequentially.
//! Inputs own independent RNG streams and outputs are collected in input
//! order, so results are identical either way and for any thread count.

/// Map in input order, in parallel when the feature is enabled.
#[cfg(feature = "parallel")]
pub fn maybe_par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

/// Map in input order, sequentially.
#[cfg(not(feature = "parallel"))]
pub fn maybe_par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Always-sequential map with the same signature; the benchmark baseline.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Run `f` inside a worker pool of the given size. Without the `parallel`
/// feature this just calls `f`. Results do not depend on the pool size.
#[cfg(feature = "parallel")]
pub fn with_worker_pool<T, F>(workers: usize, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("worker pool")
        .install(f)
}

/// Run `f` inside a worker pool of the given size. Without the `parallel`
/// feature this just calls `f`. Results do not depend on the pool size.
#[cfg(not(feature = "parallel"))]
pub fn with_worker_pool<T, F>(_workers: usize, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    f()
}
