//! Predecessor combination search.
//!
//! Train a blockwise network, keep per-block snapshots from selected epochs,
//! then search over which snapshot each block should come from so that the
//! assembled network is both accurate and well calibrated.

pub mod blockprobe;
pub mod calmetrics;
pub mod ckptstore;
pub mod combsearch;
pub mod data;
pub mod error;
pub mod math;
pub mod netcore;
pub mod orchestrator;
pub mod pipeline;
pub mod seed;
pub mod surrogate;

pub use error::{Error, Result};
