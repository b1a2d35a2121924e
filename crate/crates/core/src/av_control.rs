//! Minimum-energy approach trajectories for lead AVs.
//!
//! Given a start state and an assigned stop-line time, [`solve`] returns the
//! profile minimising `∫u²` that reaches the line at the speed limit, under
//! box bounds on speed and acceleration. Optimal controls are piecewise linear
//! with one common slope on every unsaturated arc, so each constraint
//! structure reduces to a one-parameter (or nested one-parameter) search:
//!
//! * unconstrained: `u = a·τ + b`, closed form;
//! * saturated: `u = clamp(a·τ + b)`;
//! * minimum-speed arc: slow down to `v_min`, hold it (a full stop when
//!   `v_min = 0`), speed back up;
//! * maximum-speed arc: speed up to `v_max` early and cruise.

use serde::Serialize;

use crate::error::BvpError;
use crate::model::{IntersectionGeometry, KinematicState, VehicleParams};

/// Upper bound on constraint-structure switches before giving up.
pub const MAX_CASE_SWITCHES: usize = 8;

const BISECT_ITERS: usize = 200;
const V_TOL: f64 = 1e-9;
const DIST_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvpSpec {
    pub t_start: f64,
    /// Assigned stop-line time.
    pub t_entry: f64,
    pub v_start: f64,
    pub v_end: f64,
    /// Target position (the stop line).
    pub distance: f64,
    pub p_start: f64,
    pub bounds: VehicleParams,
}

impl BvpSpec {
    /// Reach the stop line at `t_entry` travelling at the speed limit.
    pub fn to_stop_line(
        state: &KinematicState,
        t_entry: f64,
        geometry: &IntersectionGeometry,
        params: &VehicleParams,
    ) -> Self {
        Self {
            t_start: state.t,
            t_entry,
            v_start: state.v,
            v_end: params.v_max,
            distance: geometry.control_len,
            p_start: state.p,
            bounds: *params,
        }
    }

    pub fn duration(&self) -> f64 {
        self.t_entry - self.t_start
    }

    fn validate(&self) -> Result<(), BvpError> {
        let b = &self.bounds;
        let bad = |m: String| Err(BvpError::InvalidSpec(m));
        if !(self.t_entry > self.t_start) {
            return bad(format!("t_entry {} must exceed t_start {}", self.t_entry, self.t_start));
        }
        if !(self.distance > self.p_start) {
            return bad(format!("distance {} must exceed p_start {}", self.distance, self.p_start));
        }
        if b.validate().is_err() {
            return bad("bounds are not a valid parameter set".into());
        }
        for (name, v) in [("v_start", self.v_start), ("v_end", self.v_end)] {
            if !(v >= b.v_min - V_TOL && v <= b.v_max + V_TOL) {
                return bad(format!("{name} = {v} outside [{}, {}]", b.v_min, b.v_max));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SegmentKind {
    /// `u = a·s + b`, `v = a·s²/2 + b·s + c`, `p = a·s³/6 + b·s²/2 + c·s + d`
    /// with `s` measured from the segment start.
    Cubic {
        a: f64,
        b: f64,
        c: f64,
        d: f64,
    },
    ConstAccel {
        u: f64,
        v0: f64,
        p0: f64,
    },
    ConstVel {
        v: f64,
        p0: f64,
    },
    Stopped {
        p: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySegment {
    pub kind: SegmentKind,
    pub t_from: f64,
    pub t_to: f64,
}

impl TrajectorySegment {
    /// Position, speed and acceleration at absolute time `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let s = t - self.t_from;
        match self.kind {
            SegmentKind::Cubic { a, b, c, d } => {
                (((a / 6.0 * s + b / 2.0) * s + c) * s + d, (a / 2.0 * s + b) * s + c, a * s + b)
            }
            SegmentKind::ConstAccel { u, v0, p0 } => (p0 + v0 * s + 0.5 * u * s * s, v0 + u * s, u),
            SegmentKind::ConstVel { v, p0 } => (p0 + v * s, v, 0.0),
            SegmentKind::Stopped { p } => (p, 0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryProfile {
    pub segments: Vec<TrajectorySegment>,
    /// `∫u² dt` over the profile.
    pub energy: f64,
    pub t_start: f64,
    pub t_entry: f64,
    pub p_end: f64,
    pub v_end: f64,
}

impl TrajectoryProfile {
    /// State at `t`. Before the start the initial state is held; after
    /// `t_entry` the vehicle is extrapolated at constant terminal speed.
    pub fn state_at(&self, t: f64) -> KinematicState {
        if t >= self.t_entry {
            return KinematicState { t, p: self.p_end + self.v_end * (t - self.t_entry), v: self.v_end, u: 0.0 };
        }
        let idx = self.segments.partition_point(|s| s.t_to <= t).min(self.segments.len() - 1);
        let seg = &self.segments[idx];
        let (p, v, u) = seg.eval(t.max(seg.t_from));
        KinematicState { t, p, v, u }
    }

    pub fn u_at(&self, t: f64) -> f64 {
        self.state_at(t).u
    }
}

/// Earliest time the stop line can be reached: full acceleration to the
/// speed limit, then cruise.
pub fn earliest_entry(state: &KinematicState, geometry: &IntersectionGeometry, params: &VehicleParams) -> f64 {
    let remaining = geometry.control_len - state.p;
    if remaining <= 0.0 {
        return state.t;
    }
    let v = state.v.min(params.v_max);
    let t1 = (params.v_max - v) / params.u_max;
    let d = v * t1 + 0.5 * params.u_max * t1 * t1;
    if d >= remaining {
        // The line comes before the speed limit does.
        let a = params.u_max;
        return state.t + (-v + (v * v + 2.0 * a * remaining).sqrt()) / a;
    }
    state.t + t1 + (remaining - d) / params.v_max
}

/// Closed-form coefficients `(a, b)` of the unconstrained optimum
/// `u(τ) = a·τ + b` on `[0, t]`.
pub fn unconstrained_coefficients(t: f64, dist: f64, v0: f64, v1: f64) -> (f64, f64) {
    let dv = v1 - v0;
    let dp = dist - v0 * t;
    let a = (6.0 * dv * t - 12.0 * dp) / (t * t * t);
    let b = (dv - a * t * t / 2.0) / t;
    (a, b)
}

/// Solve the minimum-energy boundary-value problem.
pub fn solve(spec: &BvpSpec) -> Result<TrajectoryProfile, BvpError> {
    spec.validate()?;
    let b = &spec.bounds;
    let prob = Local {
        t: spec.duration(),
        dist: spec.distance - spec.p_start,
        v0: spec.v_start.clamp(b.v_min, b.v_max),
        v1: spec.v_end.clamp(b.v_min, b.v_max),
        umin: b.u_min,
        umax: b.u_max,
        vmin: b.v_min,
        vmax: b.v_max,
    };
    let dv = prob.v1 - prob.v0;
    if dv > prob.umax * prob.t + V_TOL || dv < prob.umin * prob.t - V_TOL {
        return Err(BvpError::Infeasible);
    }
    let pieces = solve_local(&prob)?;
    Ok(build_profile(spec, &prob, &pieces))
}

#[derive(Debug, Clone, Copy)]
enum Structure {
    Unconstrained,
    Saturated,
    MinSpeedArc,
    MaxSpeedArc,
}

enum Outcome {
    Solved(Vec<Piece>),
    Switch(Structure),
}

fn solve_local(prob: &Local) -> Result<Vec<Piece>, BvpError> {
    let mut current = Structure::Unconstrained;
    for _ in 0..=MAX_CASE_SWITCHES {
        let outcome = match current {
            Structure::Unconstrained => {
                let (a, b) = unconstrained_coefficients(prob.t, prob.dist, prob.v0, prob.v1);
                let pieces = vec![Piece { dur: prob.t, u0: b, jerk: a }];
                match prob.speed_violation(&pieces) {
                    Some(s) => Outcome::Switch(s),
                    None => {
                        let (u_lo, u_hi) = (b.min(a * prob.t + b), b.max(a * prob.t + b));
                        if u_lo < prob.umin - V_TOL || u_hi > prob.umax + V_TOL {
                            Outcome::Switch(Structure::Saturated)
                        } else {
                            Outcome::Solved(pieces)
                        }
                    }
                }
            }
            Structure::Saturated => {
                let pieces = prob.saturated().ok_or(BvpError::Infeasible)?;
                match prob.speed_violation(&pieces) {
                    Some(s) => Outcome::Switch(s),
                    None => Outcome::Solved(pieces),
                }
            }
            Structure::MinSpeedArc => match prob.min_speed_arc()? {
                Some(pieces) => Outcome::Solved(pieces),
                None => Outcome::Switch(Structure::Saturated),
            },
            Structure::MaxSpeedArc => match prob.max_speed_arc()? {
                Some(pieces) => Outcome::Solved(pieces),
                None => Outcome::Switch(Structure::Saturated),
            },
        };
        match outcome {
            Outcome::Solved(p) => return Ok(p),
            Outcome::Switch(next) => current = next,
        }
    }
    Err(BvpError::CaseLimit(MAX_CASE_SWITCHES))
}

/// Control arc `u(s) = u0 + jerk·s` for `s ∈ [0, dur]`.
#[derive(Debug, Clone, Copy)]
struct Piece {
    dur: f64,
    u0: f64,
    jerk: f64,
}

impl Piece {
    fn energy(&self) -> f64 {
        let d = self.dur;
        self.u0 * self.u0 * d + self.u0 * self.jerk * d * d + self.jerk * self.jerk * d * d * d / 3.0
    }

    /// `(Δp, v_end)` starting from speed `v`.
    fn advance(&self, v: f64) -> (f64, f64) {
        let d = self.dur;
        let dp = v * d + self.u0 * d * d / 2.0 + self.jerk * d * d * d / 6.0;
        (dp, v + self.u0 * d + self.jerk * d * d / 2.0)
    }

    /// Extreme speeds reached over the arc.
    fn speed_range(&self, v: f64) -> (f64, f64) {
        let (_, v_end) = self.advance(v);
        let (mut lo, mut hi) = (v.min(v_end), v.max(v_end));
        if self.jerk != 0.0 {
            let s = -self.u0 / self.jerk;
            if s > 0.0 && s < self.dur {
                let vs = v + self.u0 * s + self.jerk * s * s / 2.0;
                lo = lo.min(vs);
                hi = hi.max(vs);
            }
        }
        (lo, hi)
    }
}

fn propagate(pieces: &[Piece], v0: f64) -> (f64, f64) {
    pieces.iter().fold((0.0, v0), |(p, v), pc| {
        let (dp, v1) = pc.advance(v);
        (p + dp, v1)
    })
}

/// Append `u(τ) = clamp(a·τ + b)` over `[from, to]` as pieces.
fn push_clamped_linear(out: &mut Vec<Piece>, a: f64, b: f64, from: f64, to: f64, umin: f64, umax: f64) {
    if to <= from {
        return;
    }
    let mut cuts = vec![from, to];
    if a != 0.0 {
        for level in [umin, umax] {
            let tau = (level - b) / a;
            if tau > from && tau < to {
                cuts.push(tau);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    for w in cuts.windows(2) {
        let (s, e) = (w[0], w[1]);
        if e <= s {
            continue;
        }
        let raw = a * 0.5 * (s + e) + b;
        let piece = if raw <= umin {
            Piece { dur: e - s, u0: umin, jerk: 0.0 }
        } else if raw >= umax {
            Piece { dur: e - s, u0: umax, jerk: 0.0 }
        } else {
            Piece { dur: e - s, u0: a * s + b, jerk: a }
        };
        out.push(piece);
    }
}

/// Time to change speed by `delta ≥ 0` along a ramp of slope `a` that
/// saturates at `cap`.
fn ramp_time(delta: f64, cap: f64, a: f64) -> f64 {
    if delta <= 0.0 {
        0.0
    } else if delta <= cap * cap / (2.0 * a) {
        (2.0 * delta / a).sqrt()
    } else {
        cap / a + (delta - cap * cap / (2.0 * a)) / cap
    }
}

/// Root of a monotone function on `[lo, hi]` given `f(lo)` and `f(hi)` of
/// opposite sign.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let f_lo_neg = f(lo) < 0.0;
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) < 0.0) == f_lo_neg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Grow `x` geometrically until `pred` holds; `None` if it never does.
fn expand_until(mut x: f64, pred: impl Fn(f64) -> bool) -> Option<f64> {
    for _ in 0..400 {
        if pred(x) {
            return Some(x);
        }
        x *= 2.0;
        if !x.is_finite() {
            break;
        }
    }
    None
}

/// The problem in local coordinates: `τ ∈ [0, t]`, positions relative to
/// the start.
#[derive(Debug, Clone, Copy)]
struct Local {
    t: f64,
    dist: f64,
    v0: f64,
    v1: f64,
    umin: f64,
    umax: f64,
    vmin: f64,
    vmax: f64,
}

impl Local {
    fn dist_tol(&self) -> f64 {
        DIST_RTOL * self.dist.max(1.0)
    }

    fn speed_violation(&self, pieces: &[Piece]) -> Option<Structure> {
        let mut v = self.v0;
        let (mut lo, mut hi) = (v, v);
        for pc in pieces {
            let (l, h) = pc.speed_range(v);
            lo = lo.min(l);
            hi = hi.max(h);
            v = pc.advance(v).1;
        }
        if lo < self.vmin - V_TOL {
            Some(Structure::MinSpeedArc)
        } else if hi > self.vmax + V_TOL {
            Some(Structure::MaxSpeedArc)
        } else {
            None
        }
    }

    fn clamped(&self, a: f64, b: f64) -> Vec<Piece> {
        let mut out = Vec::with_capacity(3);
        push_clamped_linear(&mut out, a, b, 0.0, self.t, self.umin, self.umax);
        out
    }

    /// `u = clamp(a·τ + b)`: for each slope `a` pick `b` to hit `v1`, then
    /// pick `a` to hit the distance. End speed rises with `b`; distance
    /// falls with `a`.
    fn saturated(&self) -> Option<Vec<Piece>> {
        let t = self.t;
        let b_for = |a: f64| {
            let lo = self.umin - (a * t).max(0.0);
            let hi = self.umax - (a * t).min(0.0);
            bisect(lo, hi, |b| propagate(&self.clamped(a, b), self.v0).1 - self.v1)
        };
        let excess = |a: f64| propagate(&self.clamped(a, b_for(a)), self.v0).0 - self.dist;

        let (a0, _) = unconstrained_coefficients(t, self.dist, self.v0, self.v1);
        let scale = (self.umax - self.umin) / t;
        let hi = a0 + expand_until(scale, |w| excess(a0 + w) <= 0.0)?;
        let lo = a0 - expand_until(scale, |w| excess(a0 - w) >= 0.0)?;
        let a = bisect(lo, hi, excess);
        let pieces = self.clamped(a, b_for(a));
        let (p, v) = propagate(&pieces, self.v0);
        ((p - self.dist).abs() <= 1e-7 * self.dist.max(1.0) && (v - self.v1).abs() <= 1e-7 * self.v1.max(1.0))
            .then_some(pieces)
    }

    fn min_arc_pieces(&self, a: f64) -> Option<Vec<Piece>> {
        let t1 = ramp_time(self.v0 - self.vmin, -self.umin, a);
        let t2 = ramp_time(self.v1 - self.vmin, self.umax, a);
        let hold = self.t - t1 - t2;
        if hold < 0.0 {
            return None;
        }
        let mut out = Vec::with_capacity(5);
        push_clamped_linear(&mut out, a, -a * t1, 0.0, t1, self.umin, self.umax);
        if hold > 0.0 {
            out.push(Piece { dur: hold, u0: 0.0, jerk: 0.0 });
        }
        let mut tail = Vec::with_capacity(2);
        push_clamped_linear(&mut tail, a, 0.0, 0.0, t2, self.umin, self.umax);
        out.extend(tail);
        Some(out)
    }

    fn min_arc_bang(&self) -> Option<Vec<Piece>> {
        let t1 = (self.v0 - self.vmin) / -self.umin;
        let t2 = (self.v1 - self.vmin) / self.umax;
        let hold = self.t - t1 - t2;
        (hold >= 0.0).then(|| {
            [(t1, self.umin), (hold, 0.0), (t2, self.umax)]
                .into_iter()
                .filter(|(d, _)| *d > 0.0)
                .map(|(dur, u0)| Piece { dur, u0, jerk: 0.0 })
                .collect()
        })
    }

    /// Slow to `v_min`, hold, speed back up; both ramps share slope `a`.
    /// `Ok(None)` when even a zero-length hold overshoots the distance short
    /// of it (the saturated structure applies instead).
    fn min_speed_arc(&self) -> Result<Option<Vec<Piece>>, BvpError> {
        let bang = self.min_arc_bang().ok_or(BvpError::Infeasible)?;
        let d_bang = propagate(&bang, self.v0).0;
        if self.dist < d_bang - self.dist_tol() {
            return Err(BvpError::Infeasible);
        }
        if self.dist <= d_bang + self.dist_tol() {
            return Ok(Some(bang));
        }
        // Smallest slope for which the ramps fit in the horizon.
        let fits = |a: f64| self.min_arc_pieces(a).is_some();
        let Some(a_fit) = expand_until(1e-9, fits) else {
            return Err(BvpError::Infeasible);
        };
        let a_lo = if a_fit <= 1e-9 {
            a_fit
        } else {
            let excess = |a: f64| if fits(a) { 1.0 } else { -1.0 };
            let mut a = bisect(a_fit / 2.0, a_fit, excess);
            while !fits(a) {
                a = a.next_up();
            }
            a
        };
        let dist_at = |a: f64| self.min_arc_pieces(a).map_or(f64::NAN, |p| propagate(&p, self.v0).0);
        if self.dist > dist_at(a_lo) + self.dist_tol() {
            return Ok(None);
        }
        let excess = |a: f64| dist_at(a) - self.dist;
        let Some(a_hi) = expand_until(a_lo.max(1e-9), |a| excess(a) <= 0.0) else {
            return Ok(Some(bang));
        };
        let a = bisect(a_lo, a_hi, excess);
        Ok(self.min_arc_pieces(a))
    }

    fn max_arc_pieces(&self, m: f64) -> Option<Vec<Piece>> {
        let t1 = ramp_time(self.vmax - self.v0, self.umax, m);
        if t1 > self.t {
            return None;
        }
        let mut out = Vec::with_capacity(3);
        push_clamped_linear(&mut out, -m, m * t1, 0.0, t1, self.umin, self.umax);
        if self.t > t1 {
            out.push(Piece { dur: self.t - t1, u0: 0.0, jerk: 0.0 });
        }
        Some(out)
    }

    /// Speed up to `v_max` along a ramp of slope `-m`, then cruise.
    fn max_speed_arc(&self) -> Result<Option<Vec<Piece>>, BvpError> {
        if self.v1 < self.vmax - V_TOL {
            return Err(BvpError::InvalidSpec("interior speed-limit arcs need v_end = v_max".into()));
        }
        let t_bang = (self.vmax - self.v0) / self.umax;
        if t_bang > self.t {
            return Err(BvpError::Infeasible);
        }
        let bang: Vec<Piece> = [(t_bang, self.umax), (self.t - t_bang, 0.0)]
            .into_iter()
            .filter(|(d, _)| *d > 0.0)
            .map(|(dur, u0)| Piece { dur, u0, jerk: 0.0 })
            .collect();
        let d_bang = propagate(&bang, self.v0).0;
        if self.dist > d_bang + self.dist_tol() {
            return Err(BvpError::Infeasible);
        }
        if self.dist >= d_bang - self.dist_tol() {
            return Ok(Some(bang));
        }
        let fits = |m: f64| self.max_arc_pieces(m).is_some();
        let Some(m_fit) = expand_until(1e-9, fits) else {
            return Err(BvpError::Infeasible);
        };
        let m_lo = if m_fit <= 1e-9 {
            m_fit
        } else {
            let mut m = bisect(m_fit / 2.0, m_fit, |m| if fits(m) { 1.0 } else { -1.0 });
            while !fits(m) {
                m = m.next_up();
            }
            m
        };
        let dist_at = |m: f64| self.max_arc_pieces(m).map_or(f64::NAN, |p| propagate(&p, self.v0).0);
        if self.dist < dist_at(m_lo) - self.dist_tol() {
            return Ok(None);
        }
        let excess = |m: f64| dist_at(m) - self.dist;
        let Some(m_hi) = expand_until(m_lo.max(1e-9), |m| excess(m) >= 0.0) else {
            return Ok(Some(bang));
        };
        let m = bisect(m_lo, m_hi, excess);
        Ok(self.max_arc_pieces(m))
    }
}

fn build_profile(spec: &BvpSpec, prob: &Local, pieces: &[Piece]) -> TrajectoryProfile {
    let mut segments = Vec::with_capacity(pieces.len());
    let (mut t, mut p, mut v) = (spec.t_start, spec.p_start, prob.v0);
    let mut energy = 0.0;
    for (i, pc) in pieces.iter().enumerate() {
        if pc.dur <= 0.0 {
            continue;
        }
        let t_to = if i + 1 == pieces.len() { spec.t_entry } else { t + pc.dur };
        let kind = if pc.jerk != 0.0 {
            SegmentKind::Cubic { a: pc.jerk, b: pc.u0, c: v, d: p }
        } else if pc.u0 != 0.0 {
            SegmentKind::ConstAccel { u: pc.u0, v0: v, p0: p }
        } else if v.abs() <= V_TOL {
            v = 0.0;
            SegmentKind::Stopped { p }
        } else {
            SegmentKind::ConstVel { v, p0: p }
        };
        segments.push(TrajectorySegment { kind, t_from: t, t_to });
        energy += pc.energy();
        let (dp, v1) = pc.advance(v);
        p += dp;
        v = v1;
        t = t_to;
    }
    TrajectoryProfile { segments, energy, t_start: spec.t_start, t_entry: spec.t_entry, p_end: p, v_end: v }
}
