//! Distributed sparse Gaussian-process mapping with Gaussian belief propagation.

pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod graph;
pub mod inputs;
pub mod kernel;
pub mod protocol;
pub mod region;
pub mod simulation;
pub mod sparse_gp;

pub use error::{Error, Result};
pub use gaussian::{InfoGaussian, MomentGaussian, Solver};
pub use graph::{FactorGraph, FactorId, FactorPayload, IterateOptions, IterateOutcome, Schedule, VarId};
pub use inputs::InputSet;
pub use kernel::{Family, Kernel, NoiseModel};
pub use protocol::{Observation, RobotAgent, RobotConfig};
pub use region::Rect;
pub use simulation::{run_experiment, Experiment, MetricRecord, MetricSink, Scheduler, SimConfig};
