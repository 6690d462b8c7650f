//! Operator-informed target search over geographic grids.

pub mod geogrid;
pub mod geometry;
pub mod metrics;
pub mod planner;
pub mod pomdp;
pub mod baseline;
pub mod fusion;
pub mod raster;
pub mod scenario;
pub mod sim;
pub mod sketch;
pub mod synth;
