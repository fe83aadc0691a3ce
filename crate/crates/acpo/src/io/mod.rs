//! Persistence: run configuration, binary checkpoints, and the text artifact
//! formats the pipeline stages exchange.

pub mod artifacts;
pub mod checkpoint;
pub mod config;

pub use config::RunConfig;
