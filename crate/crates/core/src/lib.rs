pub mod baseline;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod event;
pub mod graph;
pub mod head;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
