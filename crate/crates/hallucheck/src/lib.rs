//! File formats, pipeline orchestration and the command-line front end for
//! relevance-based hallucination detection. Numerics live in
//! `hallucheck-core`.

pub mod config;
pub mod error;
pub mod io;
pub mod model_file;
pub mod parallel;
pub mod pipeline;
pub mod records;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use pipeline::{Context, Profile};
