//! Configuration, stage implementations and run manifests behind the `sdm` binary.

pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::PipelineConfig;
