//! Deterministic data-parallel reductions.
//!
//! Work is split into fixed-size blocks whose boundaries do not depend on the
//! worker count. Each block is summed sequentially with compensated
//! accumulation, block partials are collected in block order, and the final
//! reduction folds them sequentially. The result is therefore bit-identical
//! whether the blocks run on one thread, on eight, or on the sequential
//! fallback build (`--no-default-features`).
//!
//! The `parallel` feature (on by default) executes blocks on the rayon global
//! pool; without it the same block loop runs inline. Both entry points exist
//! under the feature so benchmarks can compare them in a single build.

use crate::num::{Accumulator, VecAccumulator};

/// Pairs per block. Fixed: changing it changes the rounding of block
/// partials, which is observable through the bit-reproducibility guarantee.
const PAIR_BLOCK: u64 = 4096;
const ITEM_BLOCK: u64 = 256;

/// Map a flat index `t` in `0..n*(n-1)/2` to the pair `(i, j)` with `i < j`,
/// enumerating pairs row by row: (0,1), (0,2), .., (0,n-1), (1,2), ..
#[inline]
fn decode_pair(t: u64, n: u64) -> (usize, usize) {
    // Row i starts at offset i*(2n-i-1)/2 (the product is always even).
    // Invert with a float guess, then fix up; the guess is within 1 of the
    // true row for any n < 2^26.
    let row_start = |i: u64| i * (2 * n - i - 1) / 2;
    let tf = t as f64;
    let nf = n as f64;
    let guess = (2.0 * nf - 1.0 - ((2.0 * nf - 1.0) * (2.0 * nf - 1.0) - 8.0 * tf).sqrt()) / 2.0;
    let mut i = (guess.floor().max(0.0) as u64).min(n - 2);
    loop {
        let start = row_start(i);
        if t < start {
            i -= 1;
            continue;
        }
        if t >= row_start(i + 1) {
            i += 1;
            continue;
        }
        let j = i + 1 + (t - start);
        return (i as usize, j as usize);
    }
}

fn block_ranges(total: u64, block: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut lo = 0;
    while lo < total {
        let hi = (lo + block).min(total);
        out.push((lo, hi));
        lo = hi;
    }
    out
}

fn run_blocks<T, F>(ranges: Vec<(u64, u64)>, f: F, parallel: bool) -> Vec<T>
where
    T: Send,
    F: Fn((u64, u64)) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            return ranges.into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    ranges.into_iter().map(f).collect()
}

fn pair_sum_impl<F>(n: usize, f: F, parallel: bool) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    if n < 2 {
        return 0.0;
    }
    let n64 = n as u64;
    let total = n64 * (n64 - 1) / 2;
    let partials = run_blocks(
        block_ranges(total, PAIR_BLOCK),
        |(lo, hi)| {
            let mut acc = Accumulator::new();
            for t in lo..hi {
                let (i, j) = decode_pair(t, n64);
                acc.add(f(i, j));
            }
            acc.value()
        },
        parallel,
    );
    let mut acc = Accumulator::new();
    for p in partials {
        acc.add(p);
    }
    acc.value()
}

/// Sum of `f(i, j)` over all unordered pairs `i < j` of `0..n`.
pub fn pair_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    pair_sum_impl(n, f, true)
}

/// Sequential entry point with identical results; exists so benchmarks can
/// compare scheduling overhead within one build.
pub fn pair_sum_sequential<F>(n: usize, f: F) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    pair_sum_impl(n, f, false)
}

fn pair_sum_vec_impl<F>(n: usize, dim: usize, f: F, parallel: bool) -> Vec<f64>
where
    F: Fn(usize, usize, &mut [f64]) + Sync + Send,
{
    if n < 2 {
        return vec![0.0; dim];
    }
    let n64 = n as u64;
    let total = n64 * (n64 - 1) / 2;
    let partials = run_blocks(
        block_ranges(total, PAIR_BLOCK),
        |(lo, hi)| {
            let mut acc = VecAccumulator::new(dim);
            let mut buf = vec![0.0; dim];
            for t in lo..hi {
                let (i, j) = decode_pair(t, n64);
                buf.iter_mut().for_each(|b| *b = 0.0);
                f(i, j, &mut buf);
                acc.add_slice(&buf);
            }
            acc.value()
        },
        parallel,
    );
    let mut acc = VecAccumulator::new(dim);
    for p in &partials {
        acc.add_slice(p);
    }
    acc.value()
}

/// Componentwise sum of `f(i, j, out)` over unordered pairs `i < j`; `f`
/// writes the pair's contribution into `out` (zeroed beforehand).
pub fn pair_sum_vec<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, usize, &mut [f64]) + Sync + Send,
{
    pair_sum_vec_impl(n, dim, f, true)
}

pub fn pair_sum_vec_sequential<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, usize, &mut [f64]) + Sync + Send,
{
    pair_sum_vec_impl(n, dim, f, false)
}

/// Sum of `f(i)` over `0..n` with the same fixed-block determinism.
pub fn index_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let partials = run_blocks(
        block_ranges(n as u64, ITEM_BLOCK),
        |(lo, hi)| {
            let mut acc = Accumulator::new();
            for i in lo..hi {
                acc.add(f(i as usize));
            }
            acc.value()
        },
        true,
    );
    let mut acc = Accumulator::new();
    for p in partials {
        acc.add(p);
    }
    acc.value()
}

/// Componentwise sum of `f(i, out)` over `0..n`.
pub fn index_sum_vec<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let partials = run_blocks(
        block_ranges(n as u64, ITEM_BLOCK),
        |(lo, hi)| {
            let mut acc = VecAccumulator::new(dim);
            let mut buf = vec![0.0; dim];
            for i in lo..hi {
                buf.iter_mut().for_each(|b| *b = 0.0);
                f(i as usize, &mut buf);
                acc.add_slice(&buf);
            }
            acc.value()
        },
        true,
    );
    let mut acc = VecAccumulator::new(dim);
    for p in &partials {
        acc.add_slice(p);
    }
    acc.value()
}

/// Cap the rayon global pool at `n` worker threads. Returns `true` when the
/// cap took effect; `false` when the pool was already built (the process keeps
/// its existing width) or when the crate was compiled without the `parallel`
/// feature, in which case everything runs inline anyway. Results never depend
/// on the outcome — only timing does.
pub fn set_thread_cap(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        return rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_ok();
    }
    #[allow(unreachable_code)]
    {
        let _ = n;
        false
    }
}

/// Map `f` over `0..n`, preserving index order in the output. Used for
/// replications and grid points; each call must be self-contained (own RNG
/// stream) so scheduling cannot influence results.
pub fn ordered_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    #[allow(unreachable_code)]
    (0..n).map(f).collect()
}
