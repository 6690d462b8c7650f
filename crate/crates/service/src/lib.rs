//! Mission sessions over HTTP and the batch commands of the `searchgrid` tool.

pub mod api;
pub mod commands;
pub mod session;
pub mod store;

/// Directory for cached geographic feature grids.
pub const CACHE_ENV: &str = "SEARCHGRID_CACHE_DIR";
