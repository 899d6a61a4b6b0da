//! Thread-pool setup and the chunked parallel loop used by the convolution kernels.
//!
//! Every parallel loop hands each task a disjoint output chunk and keeps the
//! accumulation order inside a chunk fixed, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "DCATTN_THREADS";

/// Reads [`THREADS_ENV`] and configures the global rayon pool. Returns the
/// thread count in effect. Calling it twice is harmless; the first pool wins.
pub fn init_from_env() -> usize {
    let requested = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = requested {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len`-sized pieces of `buf`.
pub(crate) fn for_each_chunk<T, F>(buf: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if rayon::current_num_threads() <= 1 || buf.len() < 4096 {
        buf.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        buf.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}
