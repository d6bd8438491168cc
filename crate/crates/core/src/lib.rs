//! AdaMCT: adaptive mixture of CNN and Transformer layers for sequential
//! recommendation, with the data pipeline, training loop and sampled-negative
//! evaluation needed to run it end to end.

pub mod blocks;
pub mod check;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use rng::RngState;
