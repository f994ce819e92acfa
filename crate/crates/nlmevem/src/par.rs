//! Internal fan-out helper. Results always come back in input order, so
//! reductions downstream are deterministic with any thread count.

use crate::error::Result;
use alloc::vec::Vec;

#[cfg(feature = "rayon")]
pub(crate) fn map_indexed<T, F>(idx: &[usize], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    idx.par_iter().map(|&i| f(i)).collect()
}

#[cfg(not(feature = "rayon"))]
pub(crate) fn map_indexed<T, F>(idx: &[usize], f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T>,
{
    idx.iter().map(|&i| f(i)).collect()
}
