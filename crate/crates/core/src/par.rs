//! Data-parallel helpers with a fixed reduction order.
//!
//! Work is split into fixed-size chunks of item indices. Each chunk produces a
//! partial accumulator; partials are merged in ascending chunk order. Because
//! the chunk layout and merge order never depend on the worker count, the
//! parallel and sequential paths produce bitwise-identical results.
//!
//! With the `parallel` feature disabled (or `ExecMode::Sequential`) chunks run
//! on the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runtime execution mode. `Parallel` degrades to sequential execution when
/// the `parallel` feature is compiled out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl ExecMode {
    pub fn from_flag(parallel: bool) -> Self {
        if parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Items per chunk. A compile-time constant so that results never depend on
/// thread count.
pub const CHUNK: usize = 16;

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

/// Map each item index to a value, preserving index order.
pub fn map_indexed<T: Send, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Fold item indices into per-chunk accumulators created by `init`, then merge
/// the chunk accumulators in ascending chunk order.
pub fn fold_chunked<A, F, M>(mode: ExecMode, n: usize, init: impl Fn() -> A + Sync + Send, fold: F, merge: M) -> Option<A>
where
    A: Send,
    F: Fn(&mut A, usize) + Sync + Send,
    M: Fn(&mut A, A),
{
    let ranges = chunk_ranges(n);
    let run_chunk = |range: std::ops::Range<usize>| {
        let mut acc = init();
        for i in range {
            fold(&mut acc, i);
        }
        acc
    };

    #[cfg(feature = "parallel")]
    let partials: Vec<A> = if mode == ExecMode::Parallel {
        ranges.into_par_iter().map(run_chunk).collect()
    } else {
        ranges.into_iter().map(run_chunk).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<A> = {
        let _ = mode;
        ranges.into_iter().map(run_chunk).collect()
    };

    let mut iter = partials.into_iter();
    let mut total = iter.next()?;
    for p in iter {
        merge(&mut total, p);
    }
    Some(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_like(mode: ExecMode, n: usize) -> Vec<f64> {
        fold_chunked(
            mode,
            n,
            || vec![0.0f64; 4],
            |acc, i| {
                let x = (i as f64 + 1.0).sqrt() * 0.123;
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += x / (k as f64 + 1.0);
                }
            },
            |a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            },
        )
        .unwrap()
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        for n in [1, 5, 16, 17, 100] {
            let s = grad_like(ExecMode::Sequential, n);
            let p = grad_like(ExecMode::Parallel, n);
            assert_eq!(s, p, "n = {n}");
        }
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(ExecMode::Parallel, 37, |i| i * i);
        assert_eq!(v, (0..37).map(|i| i * i).collect::<Vec<_>>());
    }
}
