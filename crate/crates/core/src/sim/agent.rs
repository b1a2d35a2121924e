//! Per-vehicle state machine and the single-step update shared by the live
//! simulation and schedule prediction.
//!
//! [`advance`] is a pure function of the agent's own state and what it can
//! see at step `k`: its same-lane predecessor, its lane's phase and the
//! predicted green step. Running it in either context from the same inputs
//! gives bit-identical results.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::av_control::{self, BvpSpec, TrajectoryProfile};
use crate::dynamics::{self, FollowContext, LeadContext, Phase};
use crate::model::{IntersectionGeometry, KinematicState, VehicleClass, VehicleParams};

/// Positional slack used for zone transitions (m).
pub const ZONE_TOL: f64 = 1e-6;

/// Slack when comparing a plan's entry time against a green step (s).
const PLAN_TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Control,
    Merge,
    Exited,
}

impl Zone {
    pub fn as_str(self) -> &'static str {
        match self {
            Zone::Control => "control",
            Zone::Merge => "merge",
            Zone::Exited => "exited",
        }
    }
}

/// Discrete state carried between steps besides kinematics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Internals {
    /// Deceleration latched when red was first perceived inside the
    /// visibility range. May exceed `|u_min|`; the applied value is clamped.
    pub latched_brake: Option<f64>,
    /// Step at which a braking lead first saw green.
    pub green_seen: Option<u64>,
    pub plan: Option<Rc<TrajectoryProfile>>,
    /// AV that lost its plan and now obeys the signal like an HDV.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub kin: KinematicState,
    pub zone: Zone,
    pub internals: Internals,
}

impl AgentState {
    pub fn entering(t: f64, v: f64) -> Self {
        Self { kin: KinematicState { t, p: 0.0, v, u: 0.0 }, zone: Zone::Control, internals: Internals::default() }
    }
}

/// What a vehicle sees at step `k`.
#[derive(Debug, Clone, Copy)]
pub struct StepEnv<'a> {
    pub k: u64,
    pub dt: f64,
    pub geometry: &'a IntersectionGeometry,
    pub class: VehicleClass,
    pub params: &'a VehicleParams,
    /// Nearest same-lane vehicle ahead, in either zone.
    pub predecessor: Option<&'a KinematicState>,
    pub predecessor_in_merge: bool,
    /// Lane phase at step `k`; only consulted by lane leaders.
    pub green: bool,
    /// Predicted step at which the lane turns green for this vehicle.
    pub green_step: Option<u64>,
}

impl StepEnv<'_> {
    pub fn is_lead(&self) -> bool {
        self.predecessor.is_none() || self.predecessor_in_merge
    }

    fn time(&self, k: u64) -> f64 {
        k as f64 * self.dt
    }
}

/// Abnormal events during a step. Predictions treat any of the first three
/// as an infeasible schedule; the live simulation records them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepFlags {
    pub infeasible_brake: bool,
    pub infeasible_plan: bool,
    /// Crossing the stop line on red was prevented by pinning the vehicle
    /// to the line.
    pub forced_stop: bool,
    pub plan_dropped: bool,
}

impl StepFlags {
    pub fn infeasible(&self) -> bool {
        self.infeasible_brake || self.infeasible_plan || self.forced_stop
    }

    pub fn merge(&mut self, other: StepFlags) {
        self.infeasible_brake |= other.infeasible_brake;
        self.infeasible_plan |= other.infeasible_plan;
        self.forced_stop |= other.forced_stop;
        self.plan_dropped |= other.plan_dropped;
    }
}

/// Advance one step.
pub fn advance(state: &AgentState, env: &StepEnv) -> (AgentState, StepFlags) {
    let mut flags = StepFlags::default();
    let mut internals = state.internals.clone();
    let kin = &state.kin;
    let g = env.geometry;

    let mut next = match state.zone {
        Zone::Exited => return (state.clone(), flags),
        Zone::Merge => integrate(kin, dynamics::merge_zone_accel(kin, env.predecessor, env.params), env),
        Zone::Control if !env.is_lead() => {
            let lead = env.predecessor.expect("followers have a predecessor");
            integrate(kin, dynamics::idm_accel(kin, &FollowContext::between(kin, lead.p, lead.v), env.params), env)
        }
        Zone::Control => lead_step(kin, &mut internals, &mut flags, env),
    };

    let mut zone = state.zone;
    if zone == Zone::Control && next.p > g.control_len + ZONE_TOL {
        if env.is_lead() && env.green {
            zone = Zone::Merge;
            internals = Internals::default();
        } else {
            next.p = g.control_len;
            next.v = 0.0;
            next.u = -kin.v / env.dt;
            // A feasible red stop overshoots the line by up to about v_m·dt
            // under the position update; the line absorbs that.
            let braking = internals.latched_brake.is_some_and(|b| b <= env.params.u_min.abs());
            flags.forced_stop |= !braking;
            internals.plan = None;
        }
    }
    if zone == Zone::Merge && next.p >= g.exit_pos() - ZONE_TOL {
        zone = Zone::Exited;
    }
    (AgentState { kin: next, zone, internals }, flags)
}

fn integrate(kin: &KinematicState, u: f64, env: &StepEnv) -> KinematicState {
    let mut next = dynamics::step(kin, u, env.dt, env.params);
    next.t = env.time(env.k + 1);
    next
}

fn lead_step(kin: &KinematicState, internals: &mut Internals, flags: &mut StepFlags, env: &StepEnv) -> KinematicState {
    let p = env.params;
    let guard = env.predecessor.map(|lead| dynamics::idm_accel(kin, &FollowContext::between(kin, lead.p, lead.v), p));
    let with_guard = |u: f64| guard.map_or(u, |gu| u.min(gu));

    if env.class == VehicleClass::Av && !internals.fallback {
        match env.green_step {
            Some(gs) => {
                let keeps = internals.plan.as_ref().is_some_and(|pl| pl.t_entry >= env.time(gs) - PLAN_TIME_TOL);
                if gs > env.k && !keeps {
                    internals.plan = None;
                    let now = KinematicState { t: env.time(env.k), ..*kin };
                    let target = env.time(gs).max(av_control::earliest_entry(&now, env.geometry, p));
                    match av_control::solve(&BvpSpec::to_stop_line(&now, target, env.geometry, p)) {
                        Ok(profile) => internals.plan = Some(Rc::new(profile)),
                        Err(_) => {
                            flags.infeasible_plan = true;
                            internals.fallback = true;
                        }
                    }
                }
            }
            None if !env.green && internals.plan.is_none() => internals.fallback = true,
            None => {}
        }
        if !internals.fallback {
            if let Some(plan) = internals.plan.clone() {
                let u_plan = plan.u_at(env.time(env.k));
                if guard.is_some_and(|gu| gu < u_plan - 1e-9) {
                    flags.plan_dropped = true;
                    internals.plan = None;
                    internals.fallback = true;
                } else {
                    let mut next = plan.state_at(env.time(env.k + 1));
                    next.t = env.time(env.k + 1);
                    return next;
                }
            } else {
                return integrate(kin, with_guard(dynamics::idm_free_accel(kin, p)), env);
            }
        }
    }

    let u = signal_rule(kin, internals, flags, env);
    integrate(kin, with_guard(u), env)
}

/// Lead response to the lane's traffic light, with latched braking and the
/// red-to-green reaction delay.
fn signal_rule(kin: &KinematicState, internals: &mut Internals, flags: &mut StepFlags, env: &StepEnv) -> f64 {
    let p = env.params;
    let g = env.geometry;
    let limit = p.u_min.abs();
    let react_steps = (p.t_react / env.dt).round() as u64;
    let dist = g.control_len - kin.p;

    let ctx = if !env.green {
        internals.green_seen = None;
        if kin.p > g.control_len - g.visibility {
            let brake = *internals.latched_brake.get_or_insert_with(|| {
                let b = dynamics::stopping_decel(kin.v, dist);
                flags.infeasible_brake |= b > limit;
                b
            });
            LeadContext { phase: Phase::Red, distance_to_stop_line: dist, v_s: kin.v, brake_rate: brake.min(limit) }
        } else {
            LeadContext::red_unseen(dist)
        }
    } else if let Some(brake) = internals.latched_brake {
        let seen = *internals.green_seen.get_or_insert(env.k);
        if env.k - seen < react_steps {
            // Still reacting: keep braking as if red.
            LeadContext { phase: Phase::Red, distance_to_stop_line: dist, v_s: kin.v, brake_rate: brake.min(limit) }
        } else {
            internals.latched_brake = None;
            internals.green_seen = None;
            LeadContext::green(dist)
        }
    } else {
        LeadContext::green(dist)
    };
    // The context never carries an over-limit brake, so this cannot fail.
    dynamics::hdv_lead_accel(kin, &ctx, p, g).unwrap_or(p.u_min)
}
