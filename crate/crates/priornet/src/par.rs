//! Data-parallel execution helpers.
//!
//! Every hot loop in the crate routes through these two primitives so the
//! `parallel` feature (rayon) and the sequential fallback produce bit-identical
//! results: work is partitioned into fixed-size chunks whose boundaries do not
//! depend on the thread count, and reductions combine per-chunk partials in
//! chunk-index order.

/// Chunk size (in partition units) used for reductions.
pub const REDUCE_CHUNK: usize = 8192;

/// Applies `f` to consecutive chunks of `data`. Each chunk is `chunk_len`
/// elements (the last may be shorter); `f` receives the chunk index and the
/// mutable slice. Chunks are disjoint, so the parallel and sequential paths
/// compute the same values.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `f` over the chunked index ranges of `0..len` and returns the partial
/// results in chunk-index order. Callers fold the partials sequentially, which
/// keeps floating-point reductions independent of the thread count.
#[cfg(feature = "parallel")]
pub fn chunk_partials<R, F>(len: usize, chunk_len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync,
{
    use rayon::prelude::*;
    let n_chunks = len.div_ceil(chunk_len).max(1);
    (0..n_chunks)
        .into_par_iter()
        .map(|i| {
            let start = i * chunk_len;
            let end = (start + chunk_len).min(len);
            f(start..end)
        })
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn chunk_partials<R, F>(len: usize, chunk_len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync,
{
    let n_chunks = len.div_ceil(chunk_len).max(1);
    (0..n_chunks)
        .map(|i| {
            let start = i * chunk_len;
            let end = (start + chunk_len).min(len);
            f(start..end)
        })
        .collect()
}

/// Sums a slice by fixed-size chunks. Deterministic for both execution modes.
pub fn sum_chunked(data: &[f64]) -> f64 {
    chunk_partials(data.len(), REDUCE_CHUNK, |r| {
        dot_unrolled_ones(&data[r])
    })
    .into_iter()
    .sum()
}

fn dot_unrolled_ones(x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut it = x.chunks_exact(4);
    for c in it.by_ref() {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for v in it.remainder() {
        s += v;
    }
    s
}

/// Dot product with four independent accumulators so the compiler can keep
/// the FP pipeline busy. Panics in debug builds if lengths differ.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ia = a.chunks_exact(4);
    let mut ib = b.chunks_exact(4);
    for (ca, cb) in ia.by_ref().zip(ib.by_ref()) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ia.remainder().iter().zip(ib.remainder()) {
        s += x * y;
    }
    s
}

/// `y += alpha * x` over slices of equal length.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
