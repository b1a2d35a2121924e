//! The live simulation: arrivals, scheduling, stepping, zone transitions,
//! the event-driven signal and the safety audit.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{advance, AgentState, StepEnv, StepFlags, Zone};
use super::arrivals::{self, Arrival, ArrivalSource};
use crate::error::{SafetyViolation, SchedulerError, SimError};
use crate::model::{IntersectionGeometry, Lane, Uid, VehicleClass, VehicleParams};
use crate::scheduler::{self, Mode, ObjectiveWeights, Prediction, SchedulerConfig, Snapshot, VehicleSnapshot};
use crate::signal::{event_phases, SignalTimeline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub geometry: IntersectionGeometry,
    pub hdv: VehicleParams,
    pub av: VehicleParams,
    pub dt: f64,
    /// Arrivals are generated in `[0, horizon)`.
    pub horizon: f64,
    /// Extra time allowed after the horizon for vehicles to clear.
    pub drain_limit: f64,
    /// Mean inter-arrival time per lane (s).
    pub mean_interarrival: f64,
    pub p_hdv: f64,
    pub v_initial: f64,
    pub weights: ObjectiveWeights,
    pub seed: u64,
    pub mode: Mode,
    /// Predict HDVs with this headway instead of the nominal one.
    pub robust_r1: Option<f64>,
    /// Live HDV headways drawn uniformly from this range.
    pub hdv_headway_range: Option<[f64; 2]>,
    /// Scheduler-visible position noise half-width for HDVs (AVs get half).
    pub position_noise: Option<f64>,
    pub arrivals: ArrivalSource,
    pub exact_cap: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            geometry: IntersectionGeometry::four_way(300.0, 100.0, 100.0).expect("default geometry"),
            hdv: VehicleParams::default_hdv(),
            av: VehicleParams::default_av(),
            dt: 0.01,
            horizon: 3600.0,
            drain_limit: 3600.0,
            mean_interarrival: 10.0,
            p_hdv: 0.5,
            v_initial: 20.0,
            weights: ObjectiveWeights::default(),
            seed: 0,
            mode: Mode::Relaxed,
            robust_r1: None,
            hdv_headway_range: None,
            position_noise: None,
            arrivals: ArrivalSource::Poisson,
            exact_cap: scheduler::EXACT_CAP,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.geometry.validate()?;
        self.hdv.validate()?;
        self.av.validate()?;
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.horizon >= 0.0 && self.drain_limit >= 0.0) {
            return bad("horizon and drain_limit must be >= 0".into());
        }
        if !(self.mean_interarrival > 0.0) {
            return bad(format!("mean_interarrival must be > 0, got {}", self.mean_interarrival));
        }
        if !(0.0..=1.0).contains(&self.p_hdv) {
            return bad(format!("p_hdv must be in [0, 1], got {}", self.p_hdv));
        }
        if !(self.v_initial >= 0.0 && self.v_initial <= self.hdv.v_max.min(self.av.v_max)) {
            return bad(format!("v_initial must be in [0, v_max], got {}", self.v_initial));
        }
        self.weights.validate().map_err(SimError::Config)?;
        if let Some(r1) = self.robust_r1 {
            if !(r1 >= self.hdv.headway) {
                return bad(format!("robust r1 must be >= the nominal HDV headway, got {r1}"));
            }
        }
        if let Some([a, b]) = self.hdv_headway_range {
            if !(a > 0.0 && b >= a) {
                return bad(format!("hdv_headway_range must satisfy 0 < a <= b, got [{a}, {b}]"));
            }
        }
        if let Some(r) = self.position_noise {
            if !(r >= 0.0) {
                return bad(format!("position_noise must be >= 0, got {r}"));
            }
        }
        if let ArrivalSource::Batch { k, .. } = self.arrivals {
            if k < 2 || k % 2 != 0 {
                return bad(format!("batch size k must be even and >= 2, got {k}"));
            }
        }
        Ok(())
    }

    fn steps(&self, t: f64) -> u64 {
        (t / self.dt - 1e-9).ceil().max(0.0) as u64
    }

    fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig { weights: self.weights, horizon_steps: None, exact_cap: self.exact_cap }
    }
}

/// Per-vehicle outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleRecord {
    pub uid: u32,
    pub lane: Lane,
    pub class: VehicleClass,
    /// Requested arrival time.
    pub t_arrival: f64,
    /// Time the vehicle actually entered the control zone.
    pub t0: f64,
    pub t_m: Option<f64>,
    pub t_f: Option<f64>,
    pub delay: Option<f64>,
    pub energy: f64,
    pub v_entry: Option<f64>,
    /// Exit time from the last schedule made before the vehicle left.
    pub predicted_t_f: Option<f64>,
    pub headway: f64,
    pub forced_stop: bool,
    pub infeasible: bool,
    pub plan_dropped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counters {
    pub forced_stops: usize,
    pub infeasible_brakes: usize,
    pub infeasible_plans: usize,
    pub plan_drops: usize,
    /// Arrivals where every insertion candidate was infeasible.
    pub schedule_fallbacks: usize,
    /// Arrivals delayed because the lane entrance was occupied.
    pub deferrals: usize,
    /// Exact-mode arrivals over the size cap, scheduled by insertion.
    pub exact_overflows: usize,
}

/// Width of the `|u|` histogram bins (m/s²).
pub const ACCEL_BIN: f64 = 0.5;
/// Bins `[0, 0.5), …, [9.5, 10)` and a final open bin.
pub const ACCEL_BINS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub mode: Mode,
    pub arrived: usize,
    pub throughput: usize,
    pub in_flight: usize,
    pub mean_delay: f64,
    pub max_delay: f64,
    pub mean_entry_velocity: f64,
    pub mean_energy: f64,
    pub t_final: f64,
    pub accel_histogram: Vec<u64>,
    pub counters: Counters,
    #[serde(skip)]
    pub vehicles: Vec<VehicleRecord>,
}

impl RunMetrics {
    /// One row per vehicle.
    pub fn write_vehicle_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "uid",
            "lane",
            "class",
            "t_arrival",
            "t0",
            "t_m",
            "t_f",
            "delay",
            "energy",
            "v_entry",
            "predicted_t_f",
            "headway",
            "forced_stop",
            "infeasible",
            "plan_dropped",
        ])?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for r in &self.vehicles {
            w.write_record([
                r.uid.to_string(),
                r.lane.to_string(),
                r.class.as_str().to_string(),
                r.t_arrival.to_string(),
                r.t0.to_string(),
                opt(r.t_m),
                opt(r.t_f),
                opt(r.delay),
                r.energy.to_string(),
                opt(r.v_entry),
                opt(r.predicted_t_f),
                r.headway.to_string(),
                r.forced_stop.to_string(),
                r.infeasible.to_string(),
                r.plan_dropped.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregates as a one-line CSV with header.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(summary_header())?;
        w.write_record(self.summary_row())?;
        w.flush()?;
        Ok(())
    }

    pub fn summary_row(&self) -> Vec<String> {
        let c = &self.counters;
        vec![
            self.seed.to_string(),
            self.mode.as_str().to_string(),
            self.arrived.to_string(),
            self.throughput.to_string(),
            self.in_flight.to_string(),
            self.mean_delay.to_string(),
            self.max_delay.to_string(),
            self.mean_entry_velocity.to_string(),
            self.mean_energy.to_string(),
            self.t_final.to_string(),
            c.forced_stops.to_string(),
            c.infeasible_brakes.to_string(),
            c.infeasible_plans.to_string(),
            c.plan_drops.to_string(),
            c.schedule_fallbacks.to_string(),
            c.deferrals.to_string(),
        ]
    }
}

pub fn summary_header() -> Vec<&'static str> {
    vec![
        "seed",
        "mode",
        "arrived",
        "throughput",
        "in_flight",
        "mean_delay",
        "max_delay",
        "mean_entry_velocity",
        "mean_energy",
        "t_final",
        "forced_stops",
        "infeasible_brakes",
        "infeasible_plans",
        "plan_drops",
        "schedule_fallbacks",
        "deferrals",
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Record a trajectory row for every vehicle every `n` steps.
    pub trajectory_every: Option<u64>,
    /// Keep the JSON of every schedule made.
    pub keep_schedules: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub vehicle_id: u32,
    pub lane: Lane,
    pub class: VehicleClass,
    pub p: f64,
    pub v: f64,
    pub u: f64,
    pub zone: Zone,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub signals: SignalTimeline,
    pub trajectory: Vec<TrajectoryRow>,
    pub schedules: Vec<String>,
}

impl RunOutput {
    pub fn write_trajectory_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "vehicle_id", "lane", "class", "p", "v", "u", "zone"])?;
        for r in &self.trajectory {
            w.write_record([
                format!("{:.2}", r.t),
                r.vehicle_id.to_string(),
                r.lane.to_string(),
                r.class.as_str().to_string(),
                format!("{:.4}", r.p),
                format!("{:.4}", r.v),
                format!("{:.4}", r.u),
                r.zone.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Live {
    uid: Uid,
    lane: Lane,
    class: VehicleClass,
    params: VehicleParams,
    predict_params: VehicleParams,
    t_arrival: f64,
    k_arrival: u64,
    state: AgentState,
    k_entry: Option<u64>,
    v_entry: Option<f64>,
    k_exit: Option<u64>,
    energy: f64,
    green_step: Option<u64>,
    predicted_exit: Option<u64>,
    flags: StepFlags,
}

/// Perturb control-zone positions by `U[-r, r]` (HDV) or `U[-r/2, r/2]`
/// (AV), then clip so each lane keeps its order with at least `s0` between
/// neighbours and stays behind the stop line.
pub fn inject_position_noise(snapshot: &mut Snapshot, r: f64, rng: &mut impl Rng) {
    if r <= 0.0 {
        return;
    }
    let l = snapshot.geometry.control_len;
    for lane in snapshot.geometry.lanes() {
        // Front to back; vehicles were pushed in arrival order.
        let mut ahead: Option<f64> = None;
        for v in snapshot.vehicles.iter_mut().filter(|v| v.lane == lane) {
            if v.state.zone != Zone::Control {
                ahead = Some(v.state.kin.p);
                continue;
            }
            let half = if v.class == VehicleClass::Av { r / 2.0 } else { r };
            let mut p = v.state.kin.p + rng.gen_range(-half..=half);
            p = p.clamp(0.0, l - 1e-3);
            if let Some(a) = ahead {
                p = p.min(a - v.params.s0);
            }
            v.state.kin.p = p;
            ahead = Some(p);
        }
    }
}

struct World<'a> {
    cfg: &'a SimConfig,
    opts: RunOptions,
    k: u64,
    vehicles: Vec<Live>,
    lanes: Vec<VecDeque<usize>>,
    /// Control-zone crossing order (indices into `vehicles`).
    seq: Vec<usize>,
    prediction: Option<Prediction>,
    counters: Counters,
    histogram: Vec<u64>,
    timeline: SignalTimeline,
    trajectory: Vec<TrajectoryRow>,
    schedules: Vec<String>,
    headway_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

/// Run one simulation.
pub fn run(cfg: &SimConfig) -> Result<RunOutput, SimError> {
    run_with(cfg, RunOptions::default())
}

pub fn run_with(cfg: &SimConfig, opts: RunOptions) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let lanes = cfg.geometry.lane_count();
    let pending: VecDeque<Arrival> = arrivals::generate(
        &cfg.arrivals,
        lanes,
        cfg.horizon,
        cfg.mean_interarrival,
        cfg.p_hdv,
        cfg.v_initial,
        cfg.seed,
    )
    .into();
    for a in &pending {
        if a.lane == 0 || a.lane > lanes {
            return Err(SimError::Config(format!("arrival on lane {} outside 1..={lanes}", a.lane)));
        }
    }
    let mut w = World {
        cfg,
        opts,
        k: 0,
        vehicles: Vec::new(),
        lanes: vec![VecDeque::new(); lanes],
        seq: Vec::new(),
        prediction: None,
        counters: Counters::default(),
        histogram: vec![0; ACCEL_BINS],
        timeline: SignalTimeline::new(lanes),
        trajectory: Vec::new(),
        schedules: Vec::new(),
        headway_rng: arrivals::stream(cfg.seed, arrivals::STREAM_HEADWAY),
        noise_rng: arrivals::stream(cfg.seed, arrivals::STREAM_NOISE),
    };
    w.simulate(pending)?;
    Ok(w.finish())
}

impl World<'_> {
    fn simulate(&mut self, mut pending: VecDeque<Arrival>) -> Result<(), SimError> {
        let horizon = self.cfg.steps(self.cfg.horizon);
        let limit = self.cfg.steps(self.cfg.horizon + self.cfg.drain_limit);
        let mut deferred: Vec<Arrival> = Vec::new();
        loop {
            self.admit(&mut pending, &mut deferred)?;
            let active = self.lanes.iter().any(|l| !l.is_empty());
            let waiting = !pending.is_empty() || !deferred.is_empty();
            if self.k >= limit || (self.k >= horizon && !active && !waiting) {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Admit arrivals due at the current step. A lane takes at most one new
    /// vehicle per step, and only once its last vehicle is far enough in
    /// to be stopped behind.
    fn admit(&mut self, pending: &mut VecDeque<Arrival>, deferred: &mut Vec<Arrival>) -> Result<(), SimError> {
        while pending.front().is_some_and(|a| self.cfg.steps(a.t0) <= self.k) {
            deferred.push(pending.pop_front().expect("front exists"));
        }
        let mut used = vec![false; self.lanes.len()];
        let mut i = 0;
        while i < deferred.len() {
            let a = deferred[i];
            let lane = a.lane - 1;
            if used[lane] || !self.entrance_clear(a) {
                if self.cfg.steps(a.t0) == self.k {
                    self.counters.deferrals += 1;
                }
                used[lane] = true;
                i += 1;
                continue;
            }
            used[lane] = true;
            deferred.remove(i);
            self.add_vehicle(a)?;
        }
        Ok(())
    }

    fn entrance_clear(&self, a: Arrival) -> bool {
        let params = self.class_params(a.class);
        let need = a.v_initial * a.v_initial / (2.0 * params.u_min.abs()) + params.s0;
        self.lanes[a.lane - 1].back().is_none_or(|&i| self.vehicles[i].state.kin.p >= need)
    }

    fn class_params(&self, class: VehicleClass) -> VehicleParams {
        match class {
            VehicleClass::Av => self.cfg.av,
            VehicleClass::Hdv => self.cfg.hdv,
        }
    }

    fn add_vehicle(&mut self, a: Arrival) -> Result<(), SimError> {
        let mut params = self.class_params(a.class);
        let mut predict_params = params;
        if a.class == VehicleClass::Hdv {
            if let Some([lo, hi]) = self.cfg.hdv_headway_range {
                params.headway = if hi > lo { self.headway_rng.gen_range(lo..=hi) } else { lo };
            }
            if let Some(r1) = self.cfg.robust_r1 {
                predict_params.headway = r1;
            }
        }
        let idx = self.vehicles.len();
        let uid = Uid(idx as u32 + 1);
        let v0 = params.clamp_speed(a.v_initial);
        self.vehicles.push(Live {
            uid,
            lane: a.lane,
            class: a.class,
            params,
            predict_params,
            t_arrival: a.t0,
            k_arrival: self.k,
            state: AgentState::entering(self.k as f64 * self.cfg.dt, v0),
            k_entry: None,
            v_entry: None,
            k_exit: None,
            energy: 0.0,
            green_step: None,
            predicted_exit: None,
            flags: StepFlags::default(),
        });
        self.lanes[a.lane - 1].push_back(idx);
        self.schedule(idx)
    }

    fn snapshot(&mut self) -> Snapshot {
        let vehicles = self
            .lanes
            .iter()
            .flatten()
            .map(|&i| {
                let v = &self.vehicles[i];
                VehicleSnapshot {
                    uid: v.uid,
                    lane: v.lane,
                    class: v.class,
                    params: v.predict_params,
                    t0: v.k_arrival as f64 * self.cfg.dt,
                    state: v.state.clone(),
                    k_entry: v.k_entry,
                    v_entry: v.v_entry,
                }
            })
            .collect();
        let mut snap = Snapshot::new(self.k, self.cfg.dt, self.cfg.geometry.clone(), vehicles);
        if let Some(r) = self.cfg.position_noise {
            inject_position_noise(&mut snap, r, &mut self.noise_rng);
        }
        snap
    }

    fn schedule(&mut self, new_idx: usize) -> Result<(), SimError> {
        let snap = self.snapshot();
        let new = self.vehicles[new_idx].uid;
        let seq: Vec<Uid> = self.seq.iter().map(|&i| self.vehicles[i].uid).collect();
        let cfg = self.cfg.scheduler();
        let reference = self.prediction.as_ref();
        let schedule = match self.cfg.mode {
            Mode::Fifo => scheduler::fifo(&snap, &seq, new, reference, &cfg)?,
            Mode::Relaxed => self.relaxed(&snap, &seq, new, &cfg)?,
            Mode::Exact => match scheduler::exact(&snap, &seq, new, reference, &cfg) {
                Ok(out) => {
                    if out.fallback {
                        self.counters.schedule_fallbacks += 1;
                    }
                    out.schedule
                }
                Err(SchedulerError::TooLarge { .. }) => {
                    self.counters.exact_overflows += 1;
                    self.relaxed(&snap, &seq, new, &cfg)?
                }
                Err(e) => return Err(e.into()),
            },
        };
        if self.opts.keep_schedules {
            self.schedules.push(schedule.to_json(&snap));
        }
        let by_uid = |u: Uid| (u.0 - 1) as usize;
        self.seq = schedule.seq.iter().map(|&u| by_uid(u)).collect();
        for t in &schedule.prediction.trajectories {
            let v = &mut self.vehicles[by_uid(t.uid)];
            v.green_step = Some(t.green_step);
            v.predicted_exit = Some(t.k_exit);
        }
        self.prediction = Some(schedule.prediction);
        Ok(())
    }

    fn relaxed(
        &mut self,
        snap: &Snapshot,
        seq: &[Uid],
        new: Uid,
        cfg: &SchedulerConfig,
    ) -> Result<scheduler::Schedule, SimError> {
        let out = scheduler::insert(snap, seq, new, self.prediction.as_ref(), cfg)?;
        if out.fallback {
            self.counters.schedule_fallbacks += 1;
        }
        Ok(out.schedule)
    }

    fn step(&mut self) -> Result<(), SimError> {
        let (k, dt) = (self.k, self.cfg.dt);
        let g = &self.cfg.geometry;
        let seq_lanes: Vec<Lane> = self.seq.iter().map(|&i| self.vehicles[i].lane).collect();
        let mut merge = vec![false; g.lane_count()];
        for lane in &self.lanes {
            for &i in lane {
                if self.vehicles[i].state.zone == Zone::Merge {
                    merge[self.vehicles[i].lane - 1] = true;
                }
            }
        }
        let phases = event_phases(g, &seq_lanes, &merge);
        self.timeline.record(k as f64 * dt, dt, &phases);
        if let Some(every) = self.opts.trajectory_every {
            if k % every.max(1) == 0 {
                self.log_trajectory();
            }
        }

        let mut updates = Vec::new();
        for (j, lane) in self.lanes.iter().enumerate() {
            let mut pred: Option<usize> = None;
            for &i in lane {
                let v = &self.vehicles[i];
                let p = pred.map(|p| &self.vehicles[p]);
                let env = StepEnv {
                    k,
                    dt,
                    geometry: g,
                    class: v.class,
                    params: &v.params,
                    predecessor: p.map(|p| &p.state.kin),
                    predecessor_in_merge: p.is_some_and(|p| p.state.zone == Zone::Merge),
                    green: phases[j] == crate::dynamics::Phase::Green,
                    green_step: v.green_step,
                };
                updates.push((i, advance(&v.state, &env)));
                pred = Some(i);
            }
        }

        for (i, (next, flags)) in updates {
            let v = &mut self.vehicles[i];
            let before = v.state.zone;
            v.flags.merge(flags);
            let a = next.kin.u.abs();
            self.histogram[((a / ACCEL_BIN) as usize).min(ACCEL_BINS - 1)] += 1;
            v.energy += next.kin.u * next.kin.u * dt;
            if before == Zone::Control && next.zone != Zone::Control {
                v.k_entry = Some(k + 1);
                v.v_entry = Some(next.kin.v);
                self.seq.retain(|&s| s != i);
            }
            if next.zone == Zone::Exited {
                v.k_exit = Some(k + 1);
                let lane = &mut self.lanes[v.lane - 1];
                if let Some(pos) = lane.iter().position(|&x| x == i) {
                    lane.remove(pos);
                }
            }
            v.state = next;
        }
        self.k += 1;
        self.audit()
    }

    fn audit(&self) -> Result<(), SimError> {
        let t = self.k as f64 * self.cfg.dt;
        let g = &self.cfg.geometry;
        let in_merge: Vec<&Live> =
            self.lanes.iter().flatten().map(|&i| &self.vehicles[i]).filter(|v| v.state.zone == Zone::Merge).collect();
        for (x, a) in in_merge.iter().enumerate() {
            for b in &in_merge[x + 1..] {
                if g.conflicts(a.lane, b.lane) {
                    return Err(SimError::Safety(SafetyViolation::MergeConflict {
                        t,
                        a: a.uid,
                        lane_a: a.lane,
                        b: b.uid,
                        lane_b: b.lane,
                    }));
                }
            }
        }
        for (j, lane) in self.lanes.iter().enumerate() {
            for pair in lane.iter().collect::<Vec<_>>().windows(2) {
                let (lead, fol) = (&self.vehicles[*pair[0]], &self.vehicles[*pair[1]]);
                let gap = lead.state.kin.p - fol.state.kin.p;
                if gap <= 0.0 {
                    return Err(SimError::Safety(SafetyViolation::RearEnd {
                        t,
                        leader: lead.uid,
                        follower: fol.uid,
                        lane: j + 1,
                        gap,
                    }));
                }
            }
        }
        Ok(())
    }

    fn log_trajectory(&mut self) {
        let t = self.k as f64 * self.cfg.dt;
        for &i in self.lanes.iter().flatten() {
            let v = &self.vehicles[i];
            self.trajectory.push(TrajectoryRow {
                t,
                vehicle_id: v.uid.0,
                lane: v.lane,
                class: v.class,
                p: v.state.kin.p,
                v: v.state.kin.v,
                u: v.state.kin.u,
                zone: v.state.zone,
            });
        }
    }

    fn finish(self) -> RunOutput {
        let dt = self.cfg.dt;
        let nominal = self.cfg.geometry.exit_pos() / self.cfg.hdv.v_max.max(self.cfg.av.v_max);
        let mut c = self.counters;
        let vehicles: Vec<VehicleRecord> = self
            .vehicles
            .iter()
            .map(|v| {
                c.forced_stops += v.flags.forced_stop as usize;
                c.infeasible_brakes += v.flags.infeasible_brake as usize;
                c.infeasible_plans += v.flags.infeasible_plan as usize;
                c.plan_drops += v.flags.plan_dropped as usize;
                let t_f = v.k_exit.map(|k| k as f64 * dt);
                VehicleRecord {
                    uid: v.uid.0,
                    lane: v.lane,
                    class: v.class,
                    t_arrival: v.t_arrival,
                    t0: v.k_arrival as f64 * dt,
                    t_m: v.k_entry.map(|k| k as f64 * dt),
                    t_f,
                    delay: v.k_exit.map(|k| ((k - v.k_arrival) as f64 * dt - nominal).max(0.0)),
                    energy: v.energy,
                    v_entry: v.v_entry,
                    predicted_t_f: v.predicted_exit.map(|k| k as f64 * dt),
                    headway: v.params.headway,
                    forced_stop: v.flags.forced_stop,
                    infeasible: v.flags.infeasible(),
                    plan_dropped: v.flags.plan_dropped,
                }
            })
            .collect();
        let done: Vec<&VehicleRecord> = vehicles.iter().filter(|r| r.t_f.is_some()).collect();
        let n = done.len();
        let mean = |f: &dyn Fn(&VehicleRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                done.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        let metrics = RunMetrics {
            seed: self.cfg.seed,
            mode: self.cfg.mode,
            arrived: vehicles.len(),
            throughput: n,
            in_flight: vehicles.len() - n,
            mean_delay: mean(&|r| r.delay.unwrap_or(0.0)),
            max_delay: done.iter().filter_map(|r| r.delay).fold(0.0, f64::max),
            mean_entry_velocity: mean(&|r| r.v_entry.unwrap_or(0.0)),
            mean_energy: mean(&|r| r.energy),
            t_final: done.iter().filter_map(|r| r.t_f).fold(0.0, f64::max),
            accel_histogram: self.histogram,
            counters: c,
            vehicles,
        };
        RunOutput { metrics, signals: self.timeline, trajectory: self.trajectory, schedules: self.schedules }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchMetrics {
    pub runs: Vec<RunMetrics>,
    pub mean_delay: Spread,
    pub max_delay: Spread,
    pub mean_entry_velocity: Spread,
    pub t_final: Spread,
    pub throughput: Spread,
}

impl BatchMetrics {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Self {
        let col = |f: fn(&RunMetrics) -> f64| Spread::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            mean_delay: col(|r| r.mean_delay),
            max_delay: col(|r| r.max_delay),
            mean_entry_velocity: col(|r| r.mean_entry_velocity),
            t_final: col(|r| r.t_final),
            throughput: col(|r| r.throughput as f64),
            runs,
        }
    }
}

/// Runs with seeds `seed .. seed + n_runs`.
pub fn batch(cfg: &SimConfig, n_runs: usize) -> Result<BatchMetrics, SimError> {
    let mut runs = Vec::with_capacity(n_runs);
    for s in 0..n_runs as u64 {
        let c = SimConfig { seed: cfg.seed + s, ..cfg.clone() };
        let out = run(&c).map_err(|e| SimError::Seeded { seed: c.seed, source: Box::new(e) })?;
        runs.push(out.metrics);
    }
    Ok(BatchMetrics::from_runs(runs))
}
