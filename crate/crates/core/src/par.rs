//! Data-parallel helpers with a sequential fallback.
//!
//! Batch work in this crate (per-question evaluation, per-source candidate
//! collection, per-candidate scoring) funnels through [`map_vec`]. With the
//! `parallel` feature (default) it maps over a rayon parallel iterator;
//! without it, over a plain sequential iterator. Both preserve input order,
//! so results are identical either way.
//!
//! [`map_vec_seq`] is always sequential regardless of features; the
//! criterion bench suite uses it to compare both paths on the same build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_vec<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_vec<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Sequential map, available under every feature set.
pub fn map_vec_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
