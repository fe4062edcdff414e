//! Data-parallel map helpers.
//!
//! `par_map` fans out over rayon when the `parallel` feature is on and falls
//! back to a plain sequential loop otherwise. Output order always matches
//! input order, so results are identical either way. `seq_map` is the
//! always-sequential variant, kept public so benchmarks can compare both
//! paths in a single build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(|it| f(it)).collect()
}

pub fn seq_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}
