//! Forward prediction of every vehicle under a crossing order.
//!
//! A vehicle's future depends only on vehicles earlier in the crossing
//! order: its same-lane predecessor (car following, lead hand-over) and the
//! exits of conflicting vehicles ahead of it (its green step). Trajectories
//! are therefore built one vehicle at a time in crossing order, and a
//! previously computed trajectory is reused whenever all of its inputs are
//! unchanged.

use std::collections::HashMap;
use std::rc::Rc;

use crate::model::{IntersectionGeometry, KinematicState, Lane, Uid, VehicleClass, VehicleParams};
use crate::sim::agent::{advance, AgentState, Internals, StepEnv, StepFlags, Zone};

/// One vehicle as the predictor sees it at the snapshot step.
#[derive(Debug, Clone)]
pub struct VehicleSnapshot {
    pub uid: Uid,
    pub lane: Lane,
    pub class: VehicleClass,
    /// Parameters used for prediction (robust mode substitutes the HDV
    /// headway here).
    pub params: VehicleParams,
    pub t0: f64,
    pub state: AgentState,
    /// Set for vehicles already in the merge zone.
    pub k_entry: Option<u64>,
    pub v_entry: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub k: u64,
    pub dt: f64,
    pub geometry: IntersectionGeometry,
    pub vehicles: Vec<VehicleSnapshot>,
    index: HashMap<Uid, usize>,
}

impl Snapshot {
    pub fn new(k: u64, dt: f64, geometry: IntersectionGeometry, vehicles: Vec<VehicleSnapshot>) -> Self {
        let index = vehicles.iter().enumerate().map(|(i, v)| (v.uid, i)).collect();
        Self { k, dt, geometry, vehicles, index }
    }

    pub fn get(&self, uid: Uid) -> Option<&VehicleSnapshot> {
        self.index.get(&uid).map(|&i| &self.vehicles[i])
    }

    pub fn get_mut(&mut self, uid: Uid) -> Option<&mut VehicleSnapshot> {
        self.index.get(&uid).map(|&i| &mut self.vehicles[i])
    }

    /// Merge-zone vehicles by entry step (then uid): they precede every
    /// control-zone vehicle in any crossing order.
    pub fn merge_order(&self) -> Vec<Uid> {
        let mut m: Vec<_> = self
            .vehicles
            .iter()
            .filter(|v| v.state.zone == Zone::Merge)
            .map(|v| (v.k_entry.unwrap_or(0), v.uid))
            .collect();
        m.sort_unstable();
        m.into_iter().map(|(_, u)| u).collect()
    }

    pub fn control_count(&self) -> usize {
        self.vehicles.iter().filter(|v| v.state.zone == Zone::Control).count()
    }

    /// Copy with every HDV's headway replaced by `r1`.
    pub fn with_hdv_headway(&self, r1: f64) -> Self {
        let mut s = self.clone();
        for v in s.vehicles.iter_mut().filter(|v| v.class == VehicleClass::Hdv) {
            v.params.headway = r1;
        }
        s
    }

    /// Default prediction horizon: four no-traffic crossings per vehicle.
    pub fn default_horizon_steps(&self) -> u64 {
        let per = self.vehicles.iter().map(|v| self.geometry.exit_pos() / v.params.v_max).fold(0.0, f64::max);
        let n = self.vehicles.len().max(1) as f64;
        (4.0 * per * n / self.dt).ceil() as u64
    }
}

/// Predicted motion of one vehicle from `k_start` until it leaves.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub uid: Uid,
    pub lane: Lane,
    pub params: VehicleParams,
    pub k_start: u64,
    /// `(p, v, u)` at steps `k_start ..= k_exit`.
    kin: Vec<[f64; 3]>,
    /// Internal-state changes, first entry at `k_start`.
    internals: Vec<(u64, Internals)>,
    pub k_entry: Option<u64>,
    pub k_exit: u64,
    pub v_entry: f64,
    pub green_step: u64,
    pub flags: StepFlags,
    serial: u64,
    /// `(serial, k_exit)` of the predecessor this was computed against.
    pred: Option<(u64, u64)>,
}

impl Trajectory {
    pub fn kin_at(&self, k: u64, dt: f64) -> KinematicState {
        let [p, v, u] = self.kin[(k - self.k_start) as usize];
        KinematicState { t: k as f64 * dt, p, v, u }
    }

    pub fn zone_at(&self, k: u64) -> Zone {
        if k >= self.k_exit {
            Zone::Exited
        } else if self.k_entry.is_some_and(|e| k >= e) {
            Zone::Merge
        } else {
            Zone::Control
        }
    }

    pub fn state_at(&self, k: u64, dt: f64) -> AgentState {
        let idx = self.internals.partition_point(|(s, _)| *s <= k) - 1;
        AgentState { kin: self.kin_at(k, dt), zone: self.zone_at(k), internals: self.internals[idx].1.clone() }
    }

    /// `∫u²` from step `k` to the exit.
    pub fn energy_from(&self, k: u64, dt: f64) -> f64 {
        let from = (k - self.k_start) as usize + 1;
        self.kin[from.min(self.kin.len())..].iter().map(|s| s[2] * s[2] * dt).sum()
    }

    pub fn is_feasible(&self) -> bool {
        !self.flags.infeasible()
    }

    pub fn steps(&self) -> impl Iterator<Item = (u64, [f64; 3])> + '_ {
        self.kin.iter().enumerate().map(move |(i, s)| (self.k_start + i as u64, *s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictError {
    /// The vehicle was predicted to brake beyond its limit, miss its plan or
    /// run a red.
    Infeasible(Uid),
    HorizonExceeded(Uid),
}

/// Predictions for a full crossing order.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub k0: u64,
    pub dt: f64,
    pub order: Vec<Uid>,
    pub trajectories: Vec<Rc<Trajectory>>,
    index: HashMap<Uid, usize>,
}

impl Prediction {
    fn from_parts(k0: u64, dt: f64, trajectories: Vec<Rc<Trajectory>>) -> Self {
        let order: Vec<Uid> = trajectories.iter().map(|t| t.uid).collect();
        let index = order.iter().enumerate().map(|(i, u)| (*u, i)).collect();
        Self { k0, dt, order, trajectories, index }
    }

    pub fn get(&self, uid: Uid) -> Option<&Rc<Trajectory>> {
        self.index.get(&uid).map(|&i| &self.trajectories[i])
    }

    pub fn is_feasible(&self) -> bool {
        self.trajectories.iter().all(|t| t.is_feasible())
    }

    pub fn t_entry(&self, uid: Uid) -> Option<f64> {
        self.get(uid).and_then(|t| t.k_entry).map(|k| k as f64 * self.dt)
    }

    pub fn t_exit(&self, uid: Uid) -> Option<f64> {
        self.get(uid).map(|t| t.k_exit as f64 * self.dt)
    }

    pub fn makespan(&self) -> f64 {
        self.trajectories.iter().map(|t| t.k_exit).max().map_or(0.0, |k| k as f64 * self.dt)
    }
}

/// Trajectories already known, looked up by vehicle for reuse.
pub trait ReuseSource {
    fn lookup(&self, uid: Uid) -> Option<&Rc<Trajectory>>;
}

impl ReuseSource for Prediction {
    fn lookup(&self, uid: Uid) -> Option<&Rc<Trajectory>> {
        self.get(uid)
    }
}

impl ReuseSource for () {
    fn lookup(&self, _: Uid) -> Option<&Rc<Trajectory>> {
        None
    }
}

impl<A: ReuseSource, B: ReuseSource> ReuseSource for (A, B) {
    fn lookup(&self, uid: Uid) -> Option<&Rc<Trajectory>> {
        self.0.lookup(uid).or_else(|| self.1.lookup(uid))
    }
}

impl<T: ReuseSource> ReuseSource for Option<&T> {
    fn lookup(&self, uid: Uid) -> Option<&Rc<Trajectory>> {
        self.and_then(|s| s.lookup(uid))
    }
}

/// Settings shared by every prediction made from one snapshot.
#[derive(Debug, Clone, Copy)]
pub struct PredictConfig {
    pub horizon_steps: u64,
    /// Abort at the first infeasible vehicle instead of continuing with the
    /// live fallbacks.
    pub strict: bool,
}

/// Incrementally built prediction: vehicles are appended in crossing order.
#[derive(Debug, Clone)]
pub struct Partial {
    trajectories: Vec<Rc<Trajectory>>,
    /// Last trajectory per lane (index into `trajectories`).
    last_in_lane: Vec<Option<usize>>,
    /// Latest exit step per lane.
    lane_exit: Vec<u64>,
}

impl Partial {
    pub fn new(geometry: &IntersectionGeometry) -> Self {
        let n = geometry.lane_count();
        Self { trajectories: Vec::new(), last_in_lane: vec![None; n], lane_exit: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Rc<Trajectory>] {
        &self.trajectories
    }

    pub fn feasible(&self) -> bool {
        self.trajectories.iter().all(|t| t.is_feasible())
    }

    fn green_step(&self, lane: Lane, geometry: &IntersectionGeometry, k0: u64) -> u64 {
        geometry.conflicting(lane).iter().map(|&c| self.lane_exit[c - 1]).fold(k0, u64::max)
    }

    /// Append an already computed trajectory (a shared prefix).
    pub fn push(&mut self, t: Rc<Trajectory>) {
        let lane = t.lane - 1;
        self.lane_exit[lane] = self.lane_exit[lane].max(t.k_exit);
        self.last_in_lane[lane] = Some(self.trajectories.len());
        self.trajectories.push(t);
    }

    pub fn finish(self, k0: u64, dt: f64) -> Prediction {
        Prediction::from_parts(k0, dt, self.trajectories)
    }
}

type MemoKey = (Uid, u64, Option<u64>);

/// Runs the per-vehicle recursion for one snapshot.
pub struct Predictor<'a> {
    snapshot: &'a Snapshot,
    config: PredictConfig,
    next_serial: u64,
    /// Fresh results keyed by vehicle, green step and predecessor serial.
    memo: HashMap<MemoKey, Result<Rc<Trajectory>, PredictError>>,
}

static SERIAL: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

impl<'a> Predictor<'a> {
    pub fn new(snapshot: &'a Snapshot, config: PredictConfig) -> Self {
        Self { snapshot, config, next_serial: 0, memo: HashMap::new() }
    }

    pub fn snapshot(&self) -> &Snapshot {
        self.snapshot
    }

    pub fn config(&self) -> PredictConfig {
        self.config
    }

    fn serial(&mut self) -> u64 {
        if self.next_serial == 0 {
            // Serials only need to be unique within a process; block-allocate.
            self.next_serial = SERIAL.fetch_add(1 << 20, std::sync::atomic::Ordering::Relaxed);
        }
        let s = self.next_serial;
        self.next_serial += 1;
        if self.next_serial.is_multiple_of(1 << 20) {
            self.next_serial = 0;
        }
        s
    }

    /// Predict a full crossing order.
    pub fn predict(&mut self, order: &[Uid], reuse: &impl ReuseSource) -> Result<Prediction, PredictError> {
        let mut partial = Partial::new(&self.snapshot.geometry);
        for &uid in order {
            self.extend(&mut partial, uid, reuse)?;
        }
        Ok(partial.finish(self.snapshot.k, self.snapshot.dt))
    }

    /// Append `uid` as the next vehicle in the crossing order.
    pub fn extend(&mut self, partial: &mut Partial, uid: Uid, reuse: &impl ReuseSource) -> Result<(), PredictError> {
        let snap = self.snapshot;
        let v = snap.get(uid).expect("vehicle in snapshot");
        let k0 = snap.k;
        let green_step = partial.green_step(v.lane, &snap.geometry, k0);
        let pred = partial.last_in_lane[v.lane - 1].map(|i| partial.trajectories[i].clone());

        let traj = match reuse.lookup(uid).filter(|r| reusable(r, v, pred.as_deref(), green_step, k0, snap.dt)) {
            Some(r) => r.clone(),
            None => {
                let key = (uid, green_step.max(k0), pred.as_ref().map(|p| p.serial));
                match self.memo.get(&key) {
                    Some(hit) => hit.clone()?,
                    None => {
                        let fresh = self.simulate(v, pred.as_deref(), green_step).map(Rc::new);
                        self.memo.insert(key, fresh.clone());
                        fresh?
                    }
                }
            }
        };
        if self.config.strict && !traj.is_feasible() {
            return Err(PredictError::Infeasible(uid));
        }
        partial.push(traj);
        Ok(())
    }

    fn simulate(
        &mut self,
        v: &VehicleSnapshot,
        pred: Option<&Trajectory>,
        green_step: u64,
    ) -> Result<Trajectory, PredictError> {
        let snap = self.snapshot;
        let (k0, dt) = (snap.k, snap.dt);
        let limit = k0 + self.config.horizon_steps;
        let mut state = v.state.clone();
        let mut kin = Vec::with_capacity(pred.map_or(2048, |p| (p.k_exit.saturating_sub(k0) as usize) + 512));
        kin.push([state.kin.p, state.kin.v, state.kin.u]);
        let mut internals = vec![(k0, state.internals.clone())];
        let mut flags = StepFlags::default();
        let (mut k_entry, mut v_entry) = (v.k_entry, v.v_entry.unwrap_or(f64::NAN));
        let mut k = k0;

        while state.zone != Zone::Exited {
            if k >= limit {
                return Err(PredictError::HorizonExceeded(v.uid));
            }
            let pred_kin = pred.filter(|p| k < p.k_exit).map(|p| p.kin_at(k, dt));
            let env = StepEnv {
                k,
                dt,
                geometry: &snap.geometry,
                class: v.class,
                params: &v.params,
                predecessor: pred_kin.as_ref(),
                predecessor_in_merge: pred.is_some_and(|p| p.k_entry.is_some_and(|e| e <= k)),
                green: k >= green_step,
                green_step: Some(green_step),
            };
            let (next, f) = advance(&state, &env);
            if f.infeasible() {
                flags.merge(f);
                if self.config.strict {
                    return Err(PredictError::Infeasible(v.uid));
                }
            }
            flags.plan_dropped |= f.plan_dropped;
            if !same_internals(&next.internals, &state.internals) {
                internals.push((k + 1, next.internals.clone()));
            }
            if state.zone == Zone::Control && next.zone != Zone::Control {
                k_entry = Some(k + 1);
                v_entry = next.kin.v;
            }
            kin.push([next.kin.p, next.kin.v, next.kin.u]);
            state = next;
            k += 1;
        }
        Ok(Trajectory {
            uid: v.uid,
            lane: v.lane,
            params: v.params,
            k_start: k0,
            kin,
            internals,
            k_entry,
            k_exit: k,
            v_entry,
            green_step,
            flags,
            serial: self.serial(),
            pred: pred.map(|p| (p.serial, p.k_exit)),
        })
    }
}

fn same_internals(a: &Internals, b: &Internals) -> bool {
    a.latched_brake == b.latched_brake
        && a.green_seen == b.green_seen
        && a.fallback == b.fallback
        && match (&a.plan, &b.plan) {
            (None, None) => true,
            (Some(x), Some(y)) => Rc::ptr_eq(x, y),
            _ => false,
        }
}

/// A stored trajectory can stand in for a fresh one if, from `k0` on, it
/// was computed from the same state, predecessor and green step.
fn reusable(r: &Trajectory, v: &VehicleSnapshot, pred: Option<&Trajectory>, green_step: u64, k0: u64, dt: f64) -> bool {
    if r.k_start > k0 || r.k_exit <= k0 || r.params != v.params {
        return false;
    }
    if r.green_step.max(k0) != green_step.max(k0) {
        return false;
    }
    let old_pred = r.pred.filter(|&(_, exit)| exit > k0).map(|(s, _)| s);
    if old_pred != pred.map(|p| p.serial) {
        return false;
    }
    r.state_at(k0, dt) == v.state
}
