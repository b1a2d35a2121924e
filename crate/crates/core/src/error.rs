use thiserror::Error;

use crate::model::Uid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown vehicle class {0:?} (expected AV or HDV)")]
    UnknownClass(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid vehicle parameters: {0}")]
    Params(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    /// Stopping at the line needs more deceleration than `|u_min|` allows.
    #[error("infeasible brake: {required:.3} m/s^2 needed, {limit:.3} m/s^2 available")]
    InfeasibleBrake { required: f64, limit: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BvpError {
    #[error("malformed boundary-value problem: {0}")]
    InvalidSpec(String),
    #[error("no admissible profile reaches the stop line at the requested time")]
    Infeasible,
    #[error("constraint case detection did not settle after {0} switches")]
    CaseLimit(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("vehicle {0} did not clear the intersection within the prediction horizon")]
    HorizonExceeded(Uid),
    #[error("exact search over {n} vehicles exceeds the cap of {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("vehicle {0} is not in the snapshot")]
    UnknownVehicle(Uid),
}

/// Two vehicles from conflicting lanes inside the merge zone at once, or a
/// rear-end overlap within a lane.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyViolation {
    #[error("t={t:.2}s: {a} (lane {lane_a}) and {b} (lane {lane_b}) occupy the merge zone together")]
    MergeConflict { t: f64, a: Uid, lane_a: usize, b: Uid, lane_b: usize },
    #[error("t={t:.2}s: {follower} reached {leader} in lane {lane} (gap {gap:.3} m)")]
    RearEnd { t: f64, leader: Uid, follower: Uid, lane: usize, gap: f64 },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("safety violation: {0}")]
    Safety(SafetyViolation),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("run with seed {seed} failed")]
    Seeded {
        seed: u64,
        #[source]
        source: Box<SimError>,
    },
}

impl From<ModelError> for SimError {
    fn from(e: ModelError) -> Self {
        SimError::Config(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: field `{field}`: {message}")]
    Field { path: String, field: String, message: String },
    #[error("{path}, row {row}: {message}")]
    Row { path: String, row: usize, message: String },
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
