//! Data-parallel helpers with a sequential fallback.
//!
//! Everything that fans out over independent work items (seeds, topology
//! kinds, finite-difference coordinates, experiment configs, matmul rows)
//! goes through here. With the `parallel` feature the work runs on the rayon
//! pool; without it, or with [`Execution::Sequential`], it runs in order on
//! the calling thread. Results are always returned in input order, so both
//! paths produce identical output.

/// How to schedule a batch of independent work items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when this build can actually run work concurrently.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Execution, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    let _ = exec;
    items.into_iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs `f` on every `chunk`-sized piece of `out` together with the index of
/// its first row. Used for row-blocked kernels.
pub fn for_each_row_chunk<F>(exec: Execution, out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        let rows = out.len() / row_len;
        let per_task = rows.div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
        out.par_chunks_mut(per_task * row_len)
            .enumerate()
            .for_each(|(c, chunk)| f(c * per_task, chunk));
        return;
    }
    let _ = exec;
    f(0, out);
}

/// Runs `f` with rayon capped at `jobs` worker threads. Falls back to a plain
/// call when the feature is off or `jobs <= 1`.
pub fn with_jobs<R: Send, F: FnOnce() -> R + Send>(jobs: usize, f: F) -> R {
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(f);
        }
    }
    let _ = jobs;
    f()
}
