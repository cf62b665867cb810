//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper assigns each output element to exactly one closure call and
//! never reduces across workers, so parallel and serial execution produce
//! bit-identical results. With the `parallel` feature disabled, or after
//! [`set_serial`]`(true)`, everything runs on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

static SERIAL: AtomicBool = AtomicBool::new(false);

/// Forces serial execution at runtime (the `--deterministic` switch).
pub fn set_serial(serial: bool) {
    SERIAL.store(serial, Ordering::Relaxed);
}

pub fn is_serial() -> bool {
    SERIAL.load(Ordering::Relaxed) || !cfg!(feature = "parallel")
}

/// Caps the global worker pool. Only the first call has an effect.
pub fn init_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Reads `VF_THREADS` and applies it to the worker pool.
pub fn init_from_env() {
    let threads = std::env::var("VF_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    init_threads(threads);
}

// Work below this many rows is not worth a fork.
#[cfg(feature = "parallel")]
const MIN_PAR_ROWS: usize = 64;

/// Calls `f(row_index, row)` for each `row_len`-wide row of `data`.
pub fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    let rows = data.len() / row_len;
    #[cfg(feature = "parallel")]
    if !is_serial() && rows >= MIN_PAR_ROWS {
        use rayon::prelude::*;
        data.par_chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
        return;
    }
    let _ = rows;
    for (i, r) in data.chunks_mut(row_len).enumerate() {
        f(i, r);
    }
}

/// Collects `f(i)` for `i in 0..n`, preserving index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_serial() && n >= MIN_PAR_ROWS {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Sums `f(i)` over `0..n` as integers; exact in any order.
pub fn sum_u64<F>(n: usize, f: F) -> u64
where
    F: Fn(usize) -> u64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_serial() && n >= MIN_PAR_ROWS {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).sum();
    }
    (0..n).map(f).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_visit_every_element_once() {
        let mut v = vec![0usize; 300 * 3];
        for_each_row(&mut v, 3, |i, r| {
            for x in r.iter_mut() {
                *x += i + 1;
            }
        });
        assert!(v.chunks(3).enumerate().all(|(i, r)| r.iter().all(|&x| x == i + 1)));
    }

    #[test]
    fn collect_keeps_order() {
        let v = map_collect(1000, |i| i * 2);
        assert_eq!(v[999], 1998);
        assert_eq!(sum_u64(1000, |i| i as u64), 499_500);
    }
}
