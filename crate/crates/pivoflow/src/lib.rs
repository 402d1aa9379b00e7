//! Files, configuration, reports and the command-line pipeline around
//! [`pivoflow_core`].

pub mod bundle_io;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod pipeline;
pub mod predictions;
pub mod report;
pub mod svg;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use pipeline::{run_pipeline, run_stages, Stage};
