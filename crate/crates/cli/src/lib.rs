//! Experiment orchestration for `palm-core`: configuration, online runs,
//! parameter sweeps and report generation.

pub mod app;
pub mod config;
pub mod output;
pub mod report;
pub mod runner;
pub mod sweep;

pub use config::{Method, RunConfig};
pub use runner::{Prepared, RunReport};
