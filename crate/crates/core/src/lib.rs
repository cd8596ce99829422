pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod sim;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
