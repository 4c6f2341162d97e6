//! Execution mode for the data-parallel loops (matrix rows, attention
//! blocks, per-example decoding).
//!
//! Rayon is only linked with the `parallel` feature. Without it every mode
//! runs sequentially. Results are identical in both modes: work is split
//! over independent output elements and reductions happen in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

impl ExecMode {
    #[inline]
    pub(crate) fn split(self, work: usize) -> bool {
        #[cfg(feature = "parallel")]
        {
            self == ExecMode::Parallel && work >= PARALLEL_THRESHOLD
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = work;
            false
        }
    }
}

/// Applies `f` to each `chunk`-sized piece of `out` (with its index).
pub(crate) fn for_each_chunk<T, F>(mode: ExecMode, work: usize, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if mode.split(work) {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = (mode, work);
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel && items.len() > 1 {
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}
