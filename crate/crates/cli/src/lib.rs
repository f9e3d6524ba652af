//! Command-line pipeline around the `stagealloc` library.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
