//! Execution-mode switch for the data-parallel kernels.
//!
//! With the `parallel` feature (default) the row-wise kernels fan out over
//! rayon's pool. Every kernel partitions work by output row and never
//! reduces across rows in parallel, so results are bit-identical to the
//! sequential path. [`set_sequential`] forces the sequential path at
//! runtime (strict-determinism mode, and the benches use it to compare).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Rows below this count are never worth dispatching to the pool.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_ROWS: usize = 64;

pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Apply `f(row_index, row)` to each `width`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && out.len() / width >= MIN_PARALLEL_ROWS {
            use rayon::prelude::*;
            out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
            return;
        }
    }
    out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Map `0..n` through `f`, preserving order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
