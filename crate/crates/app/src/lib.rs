//! Command-line tools and HTTP service around `lymphdet-core`.

pub mod config;
pub mod dataset;
pub mod http;
pub mod registry;
pub mod service;
pub mod store;
