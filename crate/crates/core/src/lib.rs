pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod prompts;
pub mod tokenizer;
pub mod train;
pub mod zsl;

pub use error::{CheckpointError, Error, Result};
