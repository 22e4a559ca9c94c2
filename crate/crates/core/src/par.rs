//! Data-parallel helpers with a sequential fallback.
//!
//! Every kernel in the crate splits its output into disjoint chunks and fills
//! each chunk with a fixed, chunk-local reduction order. Running the chunks on
//! the rayon pool or in a plain loop therefore yields bitwise identical
//! results. Without the `parallel` feature, [`Exec::Parallel`] silently runs
//! sequentially.

use std::sync::atomic::{AtomicU8, Ordering};

/// Execution strategy for the chunked kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// Whether this build can actually run chunks concurrently.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

impl Default for Exec {
    fn default() -> Self {
        if Exec::parallel_available() {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

const UNSET: u8 = 0;
const SEQ: u8 = 1;
const PAR: u8 = 2;

static GLOBAL_EXEC: AtomicU8 = AtomicU8::new(UNSET);

/// Process-wide strategy used by tensor ops and the simulator.
pub fn exec() -> Exec {
    match GLOBAL_EXEC.load(Ordering::Relaxed) {
        SEQ => Exec::Sequential,
        PAR => Exec::Parallel,
        _ => Exec::default(),
    }
}

/// Override the process-wide strategy (benchmarks and tests).
pub fn set_exec(e: Exec) {
    let v = match e {
        Exec::Sequential => SEQ,
        Exec::Parallel => PAR,
    };
    GLOBAL_EXEC.store(v, Ordering::Relaxed);
}

// Below this many output elements the pool overhead dominates.
const MIN_PARALLEL_LEN: usize = 2048;

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `out`.
pub fn for_each_chunk<T, F>(exec: Exec, out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if exec == Exec::Parallel && out.len() >= MIN_PARALLEL_LEN && out.len() > chunk_len {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = exec;
    let _ = MIN_PARALLEL_LEN;
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if exec == Exec::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = exec;
    (0..n).map(f).collect()
}
