//! Stage-by-stage experiment pipeline behind the `rfprint` binary.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::PipelineError;
pub use pipeline::{Outcome, Pipeline};
