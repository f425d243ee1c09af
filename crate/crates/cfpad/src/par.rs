//! Data-parallel helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (default), the helpers dispatch to
//! rayon; without it they degrade to plain loops and rayon is not compiled
//! at all. A process-wide switch ([`set_parallel_enabled`]) additionally
//! allows turning rayon off at runtime, which the bench suite uses to
//! compare both execution modes in a single binary.
//!
//! Every helper partitions work over disjoint output regions and keeps all
//! floating-point reductions in a fixed order, so results are bit-identical
//! across modes and thread counts.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon path at runtime. No-op without the
/// `parallel` feature. Results are unaffected; only the execution
/// strategy changes.
pub fn set_parallel_enabled(enabled: bool) {
    PARALLEL_ENABLED.store(enabled, Ordering::Relaxed);
}

/// True when work will actually be dispatched to rayon.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL_ENABLED.load(Ordering::Relaxed)
}

/// Apply `f` to each fixed-size chunk of `buf`, passing the chunk index.
/// Chunks are disjoint, so the parallel and sequential paths write the
/// same bytes.
pub fn for_each_chunk_mut<F>(buf: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(chunk_len > 0 && buf.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        buf.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in buf.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// `(0..n).map(f).collect()`, parallel when enabled. Output order is by
/// index in both modes.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_dispatch_matches_sequential() {
        let mut a = vec![0.0; 24];
        let mut b = vec![0.0; 24];
        let fill = |i: usize, c: &mut [f64]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 31 + j) as f64 * 0.5;
            }
        };
        set_parallel_enabled(true);
        for_each_chunk_mut(&mut a, 4, fill);
        set_parallel_enabled(false);
        for_each_chunk_mut(&mut b, 4, fill);
        set_parallel_enabled(true);
        assert_eq!(a, b);
    }

    #[test]
    fn map_indexed_order_is_stable() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }
}
