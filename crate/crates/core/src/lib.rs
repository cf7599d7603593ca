//! Spatiotemporal mixture-of-experts crowd-flow forecasting.
//!
//! The crate turns raw trajectories into gridded inflow/outflow tensors,
//! assembles multi-horizon training samples, and trains a small mixture of
//! convolutional experts whose spatial attention and temporal gate decompose
//! city-wide flow into interpretable patterns.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod fusion;
pub mod graph;
pub mod losses;
pub mod model;
pub mod stflow;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Ordered parallel map: results always come back in input order, so a
/// sequential reduction over them is bit-identical under any thread count.
pub(crate) mod par {
    #[cfg(feature = "parallel")]
    pub fn map_ordered<T: Sync, U: Send>(
        items: &[T],
        f: impl Fn(&T) -> U + Sync + Send,
    ) -> Vec<U> {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }

    #[cfg(not(feature = "parallel"))]
    pub fn map_ordered<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
        items.iter().map(f).collect()
    }
}
