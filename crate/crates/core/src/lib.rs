//! Signal-free intersection control for mixed autonomous and human-driven
//! traffic.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod av_control;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod scheduler;
pub mod signal;
pub mod sim;

pub use error::{BvpError, ConfigError, DynamicsError, ModelError, SafetyViolation, SchedulerError, SimError};
pub use model::{
    CrossingTimes, IntersectionGeometry, KinematicState, Lane, Uid, Vehicle, VehicleClass, VehicleId, VehicleParams,
    INFEASIBLE,
};
