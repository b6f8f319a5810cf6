//! Inner numeric kernels shared by the layer implementations.
//!
//! Storage is f32; every reduction accumulates in f64 with a fixed
//! summation order, so results are reproducible bit-for-bit and tight
//! against reference oracles.

use std::ops::Range;

/// `acc[i] += a * x[i]` with f64 accumulation.
pub(crate) fn axpy_f64(acc: &mut [f64], x: &[f32], a: f64) {
    debug_assert_eq!(acc.len(), x.len());
    for (acc_i, x_i) in acc.iter_mut().zip(x) {
        *acc_i += a * f64::from(*x_i);
    }
}

/// Dot product of two f32 slices accumulated in f64.
///
/// Sixteen independent partial sums (wide enough for the vectorizer to
/// keep them in registers); the combination order is fixed, so the
/// result is deterministic for a given input.
pub(crate) fn dot_f64(x: &[f32], y: &[f32]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 16];
    let main = x.len() - x.len() % 16;
    let (xh, xt) = x.split_at(main);
    let (yh, yt) = y.split_at(main);
    for (xc, yc) in xh.chunks_exact(16).zip(yh.chunks_exact(16)) {
        for l in 0..16 {
            acc[l] += f64::from(xc[l]) * f64::from(yc[l]);
        }
    }
    let mut tail = 0.0f64;
    for (a, b) in xt.iter().zip(yt) {
        tail += f64::from(*a) * f64::from(*b);
    }
    let mut folded = 0.0f64;
    for lane in acc {
        folded += lane;
    }
    folded + tail
}

/// Sum of an f32 slice in f64, same lane scheme as [`dot_f64`].
pub(crate) fn sum_f64(x: &[f32]) -> f64 {
    let mut acc = [0.0f64; 16];
    let main = x.len() - x.len() % 16;
    let (xh, xt) = x.split_at(main);
    for xc in xh.chunks_exact(16) {
        for l in 0..16 {
            acc[l] += f64::from(xc[l]);
        }
    }
    let mut tail = 0.0f64;
    for a in xt {
        tail += f64::from(*a);
    }
    let mut folded = 0.0f64;
    for lane in acc {
        folded += lane;
    }
    folded + tail
}

/// Number of work chunks a batch is split into.
///
/// Fixed (independent of the thread count) so that parallel gradient
/// reductions produce identical bits no matter how many threads run.
pub(crate) const BATCH_CHUNKS: usize = 8;

/// Split `0..n` into at most [`BATCH_CHUNKS`] contiguous ranges of
/// near-equal size. Pure function of `n`.
pub(crate) fn batch_chunk_ranges(n: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let chunks = BATCH_CHUNKS.min(n);
    let base = n / chunks;
    let extra = n % chunks;
    let mut ranges = Vec::with_capacity(chunks);
    let mut start = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < extra);
        ranges.push(start..start + len);
        start += len;
    }
    ranges
}

/// Split a flat buffer into one mutable slice per range, where each
/// item occupies `per_item` elements.
pub(crate) fn split_by_ranges<'a>(
    mut data: &'a mut [f32],
    ranges: &[Range<usize>],
    per_item: usize,
) -> Vec<&'a mut [f32]> {
    let mut out = Vec::with_capacity(ranges.len());
    for r in ranges {
        let (head, rest) = data.split_at_mut(r.len() * per_item);
        out.push(head);
        data = rest;
    }
    out
}
