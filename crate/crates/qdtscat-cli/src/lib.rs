//! Command-line driver for qdtscat: configuration, scans, K0 cache and outputs.

pub mod cache;
pub mod config;
pub mod output;
pub mod run;
