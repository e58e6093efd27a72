//! Predict-then-debias estimation: combine a small sample with ground truth
//! and a large sample of machine-learning proxies into a consistent estimate
//! with valid confidence intervals.

pub mod design;
pub mod error;
pub mod estimators;
pub mod intervals;
pub mod linalg;
pub mod normal;
pub mod rng;
pub mod simulation;
pub mod tuning;

pub use error::{Error, Result};
/// `(0..n).map(f)` collected in index order, in parallel when the
/// `parallel` feature is on.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
