//! Batch runs of the intersection speed-advice controller.

pub mod config;
pub mod output;
pub mod run;
pub mod summary;
