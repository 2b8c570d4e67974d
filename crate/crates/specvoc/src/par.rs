//! Order-preserving parallel map used by sweeps and batch evaluation.
//!
//! Engine runs stay single-threaded; parallelism only ever spans *independent*
//! runs or queries, so results are identical with the `parallel` feature on or
//! off — rayon's indexed collect preserves input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
