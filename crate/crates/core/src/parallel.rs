//! Order-preserving parallel map over replicate indices.
//!
//! Results always come back in index order, so any reduction done by the
//! caller is sequential and bit-for-bit independent of the thread count.

use std::ops::Range;

#[cfg(feature = "parallel")]
pub(crate) fn map_range<T, F>(range: Range<u64>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    range.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_range<T, F>(range: Range<u64>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    range.map(f).collect()
}

/// Replicates per batch when streaming large runs.
pub(crate) const BATCH: u64 = 1 << 14;
