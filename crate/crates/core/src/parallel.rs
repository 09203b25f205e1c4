//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it (or
//! after [`set_enabled(false)`](set_enabled)) they run the same closures in
//! order on the calling thread. Every helper writes results by index, so the
//! output never depends on which path ran.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
static ENABLED: AtomicBool = AtomicBool::new(true);

/// Toggle parallel dispatch at runtime. No-op without the `parallel` feature.
pub fn set_enabled(on: bool) {
    #[cfg(feature = "parallel")]
    ENABLED.store(on, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = on;
}

pub fn is_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        ENABLED.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

// A single-thread pool only adds scheduling overhead, so skip it.
#[cfg(feature = "parallel")]
fn fan_out() -> bool {
    is_enabled() && rayon::current_num_threads() > 1
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if fan_out() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len`-sized chunks.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if fan_out() && data.len() > chunk_len {
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything() {
        let mut data = vec![0.0; 37];
        for_each_chunk_mut(&mut data, 5, |ci, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (ci * 5 + j) as f64;
            }
        });
        assert!(data.iter().enumerate().all(|(i, v)| *v == i as f64));
    }
}
