//! Simulated worlds, robot motion and the experiment drivers.

pub mod config;
pub mod experiment;
pub mod field;
pub mod occupancy;
pub mod trajectory;

pub use config::{Experiment, SimConfig};
pub use experiment::{run_experiment, MetricRecord, MetricSink, Raster, Scheduler};
pub use field::{FieldGrid, TimeAxis};
pub use occupancy::{LidarConfig, OccupancyWorld};
