pub mod adapt;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod experts;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod subspace;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
