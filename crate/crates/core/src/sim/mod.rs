//! Discrete-time simulation of the intersection.

pub mod agent;
pub mod arrivals;
pub mod world;

pub use agent::{advance, AgentState, Internals, StepEnv, StepFlags, Zone, ZONE_TOL};
pub use arrivals::{parse_scripted, Arrival, ArrivalSource};
pub use world::{
    batch, inject_position_noise, run, run_with, BatchMetrics, Counters, RunMetrics, RunOptions, RunOutput, SimConfig,
    Spread, TrajectoryRow, VehicleRecord,
};
