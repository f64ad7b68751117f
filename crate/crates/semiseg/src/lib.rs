//! File formats, configuration, the command-line driver and the HTTP
//! annotation service built on `semiseg-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod render;
pub mod service;

pub use config::PipelineConfig;
pub use error::{Error, Result};
