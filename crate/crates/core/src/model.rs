//! Domain types shared by every other module: vehicle identity and class,
//! intersection geometry, kinematic state and crossing times.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Whether a vehicle can receive a communicated entry time (AV) or only
/// obeys the traffic light (HDV).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VehicleClass {
    Av,
    Hdv,
}

impl VehicleClass {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Av => "AV",
            VehicleClass::Hdv => "HDV",
        }
    }
}

impl fmt::Display for VehicleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for VehicleClass {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AV" => Ok(VehicleClass::Av),
            "HDV" => Ok(VehicleClass::Hdv),
            other => Err(ModelError::UnknownClass(other.to_string())),
        }
    }
}

/// Lane index, 1-based.
pub type Lane = usize;

/// Stable arrival-ordered identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Uid(pub u32);

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A vehicle as the controller sees it: a stable id plus its current
/// position-from-intersection index `slot` in `lane` (1 = lane leader).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VehicleId {
    pub uid: Uid,
    pub lane: Lane,
    pub slot: u32,
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{},{}{}", self.slot, self.lane, self.uid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionGeometry {
    /// Control-zone length `L` (m).
    pub control_len: f64,
    /// Merge-zone length `S` (m).
    pub merge_len: f64,
    /// Distance from the stop line within which an HDV reacts to red (m).
    pub visibility: f64,
    /// `conflicts[j - 1]` lists the lanes conflicting with lane `j`.
    conflicts: Vec<Vec<Lane>>,
}

impl IntersectionGeometry {
    pub fn new(
        control_len: f64,
        merge_len: f64,
        visibility: f64,
        conflicts: Vec<Vec<Lane>>,
    ) -> Result<Self, ModelError> {
        let g = Self { control_len, merge_len, visibility, conflicts };
        g.validate()?;
        Ok(g)
    }

    /// Standard four-approach crossing: lanes 1/3 run one axis, 2/4 the other.
    pub fn four_way(control_len: f64, merge_len: f64, visibility: f64) -> Result<Self, ModelError> {
        Self::new(control_len, merge_len, visibility, vec![vec![2, 4], vec![1, 3], vec![2, 4], vec![1, 3]])
    }

    /// Two crossing lanes (1 and 2) and nothing else.
    pub fn two_way(control_len: f64, merge_len: f64, visibility: f64) -> Result<Self, ModelError> {
        Self::new(control_len, merge_len, visibility, vec![vec![2], vec![1]])
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.merge_len > 0.0) {
            return Err(ModelError::Geometry(format!("merge length must be > 0, got {}", self.merge_len)));
        }
        if !(self.visibility > 0.0 && self.visibility <= self.control_len) {
            return Err(ModelError::Geometry(format!(
                "visibility must satisfy 0 < l <= L, got l={} L={}",
                self.visibility, self.control_len
            )));
        }
        let n = self.conflicts.len();
        if n == 0 {
            return Err(ModelError::Geometry("at least one lane is required".into()));
        }
        for (idx, set) in self.conflicts.iter().enumerate() {
            let j = idx + 1;
            for &k in set {
                if k == 0 || k > n {
                    return Err(ModelError::Geometry(format!("lane {j} lists unknown conflicting lane {k}")));
                }
                if k == j {
                    return Err(ModelError::Geometry(format!("lane {j} conflicts with itself")));
                }
                if !self.conflicts[k - 1].contains(&j) {
                    return Err(ModelError::Geometry(format!(
                        "conflict map is not symmetric: {k} in M_{j} but {j} not in M_{k}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn lane_count(&self) -> usize {
        self.conflicts.len()
    }

    pub fn lanes(&self) -> impl Iterator<Item = Lane> {
        1..=self.conflicts.len()
    }

    pub fn conflicting(&self, lane: Lane) -> &[Lane] {
        &self.conflicts[lane - 1]
    }

    pub fn conflicts(&self, a: Lane, b: Lane) -> bool {
        self.conflicts[a - 1].contains(&b)
    }

    /// Position of the far edge of the merge zone.
    pub fn exit_pos(&self) -> f64 {
        self.control_len + self.merge_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub v_min: f64,
    /// Speed limit `v_m`; also the terminal speed of AV entry profiles.
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Constant acceleration of a lead HDV released by a green light.
    pub a_h: f64,
    /// IDM safety time gap `T` (s).
    pub headway: f64,
    /// IDM standstill distance `s0` (m).
    pub s0: f64,
    /// Delay between a red->green switch and the driver's response (s).
    pub t_react: f64,
}

impl VehicleParams {
    pub fn default_hdv() -> Self {
        Self { v_min: 0.0, v_max: 20.0, u_min: -10.0, u_max: 10.0, a_h: 2.0, headway: 2.5, s0: 2.0, t_react: 1.0 }
    }

    pub fn default_av() -> Self {
        Self { headway: 1.5, t_react: 0.0, ..Self::default_hdv() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Params(m.to_string()));
        if !(self.v_min >= 0.0) {
            return bad("v_min must be >= 0");
        }
        if !(self.v_max > self.v_min) {
            return bad("v_max must exceed v_min");
        }
        if !(self.u_min < 0.0 && self.u_max > 0.0) {
            return bad("u_min < 0 < u_max is required");
        }
        if !(self.headway > 0.0) {
            return bad("headway T must be > 0");
        }
        if !(self.s0 > 0.0) {
            return bad("s0 must be > 0");
        }
        if !(self.a_h > 0.0) {
            return bad("a_h must be > 0");
        }
        if !(self.t_react >= 0.0) {
            return bad("t_react must be >= 0");
        }
        Ok(())
    }

    pub fn clamp_speed(&self, v: f64) -> f64 {
        v.clamp(self.v_min, self.v_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KinematicState {
    pub t: f64,
    pub p: f64,
    pub v: f64,
    pub u: f64,
}

/// A vehicle's control-zone entry record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: VehicleId,
    pub class: VehicleClass,
    pub t0: f64,
    pub params: VehicleParams,
    pub state: KinematicState,
    /// Entry time communicated to an AV, if any.
    pub assigned_entry: Option<f64>,
    pub v_initial: f64,
}

/// Nominal and actual/predicted crossing times. An infeasible schedule
/// leaves `t_m`/`t_f` at `f64::INFINITY`, which orders after every finite time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossingTimes {
    pub t_prime: f64,
    pub t_prime_m: f64,
    pub t_m: f64,
    pub t_f: f64,
}

pub const INFEASIBLE: f64 = f64::INFINITY;

impl CrossingTimes {
    pub fn new(t0: f64, geometry: &IntersectionGeometry, v_m: f64) -> Self {
        let (t_prime_m, t_prime) = no_traffic_times(t0, geometry, v_m);
        Self { t_prime, t_prime_m, t_m: INFEASIBLE, t_f: INFEASIBLE }
    }

    pub fn is_feasible(&self) -> bool {
        self.t_m.is_finite() && self.t_f.is_finite()
    }

    pub fn delay(&self) -> f64 {
        self.t_f - self.t_prime
    }
}

/// Entry and exit times of a vehicle that meets no traffic and drives the
/// speed limit from `t0`: `(t0 + L/v_m, t0 + (L+S)/v_m)`.
pub fn no_traffic_times(t0: f64, geometry: &IntersectionGeometry, v_m: f64) -> (f64, f64) {
    debug_assert!(v_m > 0.0);
    (t0 + geometry.control_len / v_m, t0 + (geometry.control_len + geometry.merge_len) / v_m)
}
