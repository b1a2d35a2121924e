//! Longitudinal vehicle dynamics: lead-HDV signal response, IDM car
//! following, merge-zone behaviour and the discrete-time integrator.
//!
//! Every function here is pure; the stateful parts (red-light latching,
//! reaction delay) live in [`crate::sim::agent`].

use serde::{Deserialize, Serialize};

use crate::error::DynamicsError;
use crate::model::{IntersectionGeometry, KinematicState, VehicleParams};

/// Keeps the IDM interaction term finite at zero gap.
pub const IDM_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Red,
    Green,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Red => "RED",
            Phase::Green => "GREEN",
        }
    }
}

/// What a lane's lead vehicle perceives of the signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadContext {
    pub phase: Phase,
    /// `L - p`.
    pub distance_to_stop_line: f64,
    /// Speed at the instant red was first perceived inside the visibility range.
    pub v_s: f64,
    /// Magnitude of the uniform deceleration latched at red perception.
    pub brake_rate: f64,
}

impl LeadContext {
    pub fn green(distance_to_stop_line: f64) -> Self {
        Self { phase: Phase::Green, distance_to_stop_line, v_s: 0.0, brake_rate: 0.0 }
    }

    /// Red seen from outside the visibility range: no braking yet.
    pub fn red_unseen(distance_to_stop_line: f64) -> Self {
        Self { phase: Phase::Red, distance_to_stop_line, v_s: 0.0, brake_rate: 0.0 }
    }

    /// Red perceived at distance `s` with speed `v_s`; latches `v_s^2 / 2s`.
    pub fn red_perceived(v_s: f64, s: f64, params: &VehicleParams) -> Result<Self, DynamicsError> {
        let rate = stopping_decel(v_s, s);
        if rate > params.u_min.abs() {
            return Err(DynamicsError::InfeasibleBrake { required: rate, limit: params.u_min.abs() });
        }
        Ok(Self { phase: Phase::Red, distance_to_stop_line: s, v_s, brake_rate: rate })
    }
}

/// Uniform deceleration that stops a vehicle at speed `v` within `s` metres.
pub fn stopping_decel(v: f64, s: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else if s <= 0.0 {
        f64::INFINITY
    } else {
        v * v / (2.0 * s)
    }
}

/// Acceleration of a lane-leading HDV given the phase it currently perceives.
pub fn hdv_lead_accel(
    state: &KinematicState,
    ctx: &LeadContext,
    params: &VehicleParams,
    geometry: &IntersectionGeometry,
) -> Result<f64, DynamicsError> {
    match ctx.phase {
        Phase::Red => {
            if state.p > geometry.control_len - geometry.visibility {
                if ctx.brake_rate > params.u_min.abs() {
                    return Err(DynamicsError::InfeasibleBrake { required: ctx.brake_rate, limit: params.u_min.abs() });
                }
                Ok(-ctx.brake_rate)
            } else {
                Ok(0.0)
            }
        }
        Phase::Green => Ok(if state.v < params.v_max { params.a_h } else { 0.0 }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowContext {
    /// Leader position minus own position (m).
    pub gap: f64,
    /// Own speed minus leader speed (m/s).
    pub dv: f64,
    pub leader_v: f64,
}

impl FollowContext {
    pub fn between(own: &KinematicState, leader_p: f64, leader_v: f64) -> Self {
        Self { gap: leader_p - own.p, dv: own.v - leader_v, leader_v }
    }
}

/// Desired gap `s*`. May be negative when closing fast on a faster leader;
/// it is squared as-is.
pub fn idm_desired_gap(v: f64, dv: f64, params: &VehicleParams) -> f64 {
    params.s0 + params.headway * v + v * dv / (2.0 * (params.u_max * params.u_min.abs()).sqrt())
}

/// Intelligent Driver Model acceleration, clamped to `[u_min, u_max]`.
pub fn idm_accel(own: &KinematicState, ctx: &FollowContext, params: &VehicleParams) -> f64 {
    let s_star = idm_desired_gap(own.v, ctx.dv, params);
    let free = 1.0 - (own.v / params.v_max).powi(4);
    let interaction = s_star * s_star / (ctx.gap * ctx.gap + IDM_EPSILON * IDM_EPSILON);
    (params.u_max * (free - interaction)).clamp(params.u_min, params.u_max)
}

/// Free-road IDM term: no leader, no signal.
pub fn idm_free_accel(own: &KinematicState, params: &VehicleParams) -> f64 {
    (params.u_max * (1.0 - (own.v / params.v_max).powi(4))).clamp(params.u_min, params.u_max)
}

/// Merge-zone dynamics: follow a same-lane leader with IDM, otherwise
/// accelerate at `a_h` up to the speed limit and hold it.
pub fn merge_zone_accel(own: &KinematicState, leader: Option<&KinematicState>, params: &VehicleParams) -> f64 {
    match leader {
        Some(l) => idm_accel(own, &FollowContext::between(own, l.p, l.v), params),
        None if own.v < params.v_max => params.a_h,
        None => 0.0,
    }
}

/// One integration step. Velocity is clamped to `[v_min, v_max]`; position
/// uses `p + v dt + (v' - v)^2 dt / 2` (note: `(dv)^2 dt`, not the
/// trapezoidal `u dt^2`). The returned `u` is the acceleration actually
/// realised after clamping.
pub fn step(state: &KinematicState, u: f64, dt: f64, params: &VehicleParams) -> KinematicState {
    debug_assert!(dt > 0.0);
    let v_next = params.clamp_speed(state.v + u * dt);
    let dv = v_next - state.v;
    KinematicState { t: state.t + dt, p: state.p + state.v * dt + 0.5 * dv * dv * dt, v: v_next, u: dv / dt }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> IntersectionGeometry {
        IntersectionGeometry::four_way(300.0, 100.0, 100.0).unwrap()
    }

    fn st(p: f64, v: f64) -> KinematicState {
        KinematicState { t: 0.0, p, v, u: 0.0 }
    }

    #[test]
    fn green_lead_accelerates_until_limit() {
        let hdv = VehicleParams::default_hdv();
        let g = geom();
        assert_eq!(hdv_lead_accel(&st(50.0, 10.0), &LeadContext::green(250.0), &hdv, &g).unwrap(), 2.0);
        assert_eq!(hdv_lead_accel(&st(50.0, 20.0), &LeadContext::green(250.0), &hdv, &g).unwrap(), 0.0);
    }

    #[test]
    fn red_brake_rate_and_stop_point() {
        let hdv = VehicleParams::default_hdv();
        let g = geom();
        let ctx = LeadContext::red_perceived(20.0, 100.0, &hdv).unwrap();
        assert_eq!(ctx.brake_rate, 2.0);
        assert_eq!(hdv_lead_accel(&st(200.5, 20.0), &ctx, &hdv, &g).unwrap(), -2.0);
        // Outside the visibility range red is ignored.
        assert_eq!(hdv_lead_accel(&st(150.0, 20.0), &LeadContext::red_unseen(150.0), &hdv, &g).unwrap(), 0.0);

        // Closed form: v^2 / 2a = 100 m exactly.
        let a = ctx.brake_rate;
        let stop = 200.0 + 20.0 * 20.0 / (2.0 * a);
        assert!((stop - 300.0).abs() < 1e-12);

        // Discrete integration stops within one dt * v_m of the line.
        let dt = 0.01;
        let mut s = st(200.0, 20.0);
        while s.v > 0.0 {
            s = step(&s, -a, dt, &hdv);
        }
        assert!((s.p - 300.0).abs() <= dt * hdv.v_max, "stopped at {}", s.p);
    }

    #[test]
    fn red_too_close_is_infeasible() {
        let hdv = VehicleParams::default_hdv();
        let err = LeadContext::red_perceived(20.0, 10.0, &hdv).unwrap_err();
        assert_eq!(err, DynamicsError::InfeasibleBrake { required: 20.0, limit: 10.0 });
    }

    #[test]
    fn idm_reference_values() {
        let hdv = VehicleParams::default_hdv();
        // Stopped at s0 behind a stopped leader.
        let u = idm_accel(&st(0.0, 0.0), &FollowContext { gap: 2.0, dv: 0.0, leader_v: 0.0 }, &hdv);
        assert!(u.abs() < 1e-9);
        // Free flow at the limit.
        let u = idm_accel(&st(0.0, 20.0), &FollowContext { gap: 1e9, dv: 0.0, leader_v: 20.0 }, &hdv);
        assert!(u.abs() < 1e-9);
        // Independent re-evaluation: s* = 2 + 2.5*10 = 27.
        let u = idm_accel(&st(0.0, 10.0), &FollowContext { gap: 50.0, dv: 0.0, leader_v: 10.0 }, &hdv);
        let expect = 10.0 * (1.0 - 0.0625 - 729.0 / (2500.0 + 1e-12));
        assert!((u - expect).abs() < 1e-12);
        assert!((u - 6.459).abs() < 1e-3);
    }

    #[test]
    fn idm_equilibrium_gap() {
        let hdv = VehicleParams::default_hdv();
        for v in [1.0, 5.0, 10.0, 15.0, 19.0] {
            let s_star = idm_desired_gap(v, 0.0, &hdv);
            let s_eq = s_star / (1.0 - (v / 20.0f64).powi(4)).sqrt();
            let u = idm_accel(&st(0.0, v), &FollowContext { gap: s_eq, dv: 0.0, leader_v: v }, &hdv);
            assert!(u.abs() < 1e-9, "v={v} u={u}");
        }
    }

    #[test]
    fn idm_negative_desired_gap_is_squared() {
        let hdv = VehicleParams::default_hdv();
        // Leader much faster: s* < 0 but the interaction term stays repulsive.
        let ctx = FollowContext { gap: 10.0, dv: -80.0, leader_v: 90.0 };
        assert!(idm_desired_gap(10.0, ctx.dv, &hdv) < 0.0);
        let u = idm_accel(&st(0.0, 10.0), &ctx, &hdv);
        assert!(u <= 10.0 * (1.0 - 0.0625));
    }

    #[test]
    fn merge_zone_rules() {
        let hdv = VehicleParams::default_hdv();
        assert_eq!(merge_zone_accel(&st(300.0, 0.0), None, &hdv), 2.0);
        assert_eq!(merge_zone_accel(&st(300.0, 20.0), None, &hdv), 0.0);
        let own = st(320.0, 15.0);
        let lead = st(350.0, 15.0);
        let expect = idm_accel(&own, &FollowContext { gap: 30.0, dv: 0.0, leader_v: 15.0 }, &hdv);
        assert_eq!(merge_zone_accel(&own, Some(&lead), &hdv), expect);
    }

    #[test]
    fn step_examples() {
        let hdv = VehicleParams::default_hdv();
        let s = step(&st(0.0, 20.0), 0.0, 0.01, &hdv);
        assert!((s.p - 0.2).abs() < 1e-15);
        let s = step(&st(0.0, 0.0), 2.0, 0.01, &hdv);
        assert!((s.v - 0.02).abs() < 1e-15);
        assert!((s.p - 0.5 * 0.02 * 0.02 * 0.01).abs() < 1e-18);
        let s = step(&st(0.0, 19.999), 10.0, 0.01, &hdv);
        assert_eq!(s.v, 20.0);
        let s = step(&st(0.0, 0.001), -10.0, 0.01, &hdv);
        assert_eq!(s.v, 0.0);
    }
}
