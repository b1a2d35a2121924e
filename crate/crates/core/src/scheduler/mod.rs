//! Crossing-order scheduling: relaxed single-vehicle insertion, the FIFO
//! baseline and an exhaustive search for small instances.
//!
//! All three evaluate a candidate order by forward prediction
//! ([`predict`]) and score it against the order without the new vehicle.

pub mod predict;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::SchedulerError;
use crate::model::{IntersectionGeometry, Lane, Uid, VehicleId, INFEASIBLE};
use crate::sim::agent::Zone;
pub use predict::{
    Partial, PredictConfig, PredictError, Prediction, Predictor, ReuseSource, Snapshot, Trajectory, VehicleSnapshot,
};

/// Default cap on control-zone vehicles for [`exact`].
pub const EXACT_CAP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Relaxed,
    Fifo,
    Exact,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Relaxed => "relaxed",
            Mode::Fifo => "fifo",
            Mode::Exact => "exact",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relaxed" => Ok(Mode::Relaxed),
            "fifo" => Ok(Mode::Fifo),
            "exact" => Ok(Mode::Exact),
            other => Err(format!("unknown mode {other:?} (expected relaxed, fifo or exact)")),
        }
    }
}

/// Weights on energy, exit-time sum, entry-speed deficit and makespan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 100.0, w3: 100.0, w4: 100.0 }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3), ("w4", self.w4)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(format!("weight {name} must be finite and >= 0, got {w}"));
            }
        }
        Ok(())
    }
}

/// Unweighted sums over every vehicle in a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ObjectiveTerms {
    /// `Σ ∫u²` from the snapshot on.
    pub energy: f64,
    /// `Σ t_f`.
    pub exit_sum: f64,
    /// `Σ (v_m - v(t_m))⁺`.
    pub entry_deficit: f64,
    /// `max t_f`.
    pub makespan: f64,
}

impl ObjectiveTerms {
    pub fn of(prediction: &Prediction) -> Self {
        let (k0, dt) = (prediction.k0, prediction.dt);
        let mut t = Self::default();
        for tr in &prediction.trajectories {
            let t_f = tr.k_exit as f64 * dt;
            t.energy += tr.energy_from(k0, dt);
            t.exit_sum += t_f;
            t.entry_deficit += (tr.params.v_max - tr.v_entry).max(0.0);
            t.makespan = t.makespan.max(t_f);
        }
        t
    }

    /// Terms of an order without the new vehicle, which is counted at its
    /// no-traffic exit time.
    pub fn baseline(prediction: &Prediction, new_vehicle: &VehicleSnapshot, geometry: &IntersectionGeometry) -> Self {
        let mut t = Self::of(prediction);
        t.exit_sum += new_vehicle.t0 + geometry.exit_pos() / new_vehicle.params.v_max;
        t
    }

    pub fn weighted(&self, w: &ObjectiveWeights) -> f64 {
        w.w1 * self.energy + w.w2 * self.exit_sum + w.w3 * self.entry_deficit + w.w4 * self.makespan
    }

    pub fn minus(&self, other: &Self) -> Self {
        Self {
            energy: self.energy - other.energy,
            exit_sum: self.exit_sum - other.exit_sum,
            entry_deficit: self.entry_deficit - other.entry_deficit,
            makespan: self.makespan - other.makespan,
        }
    }
}

/// Weighted objective of `candidate` relative to `baseline`, or
/// [`INFEASIBLE`]. Without a baseline the raw sums are scored.
pub fn objective(candidate: &Prediction, baseline: Option<&ObjectiveTerms>, weights: &ObjectiveWeights) -> f64 {
    if !candidate.is_feasible() {
        return INFEASIBLE;
    }
    let terms = ObjectiveTerms::of(candidate);
    match baseline {
        Some(b) => terms.minus(b).weighted(weights),
        None => terms.weighted(weights),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    pub weights: ObjectiveWeights,
    /// Per-vehicle prediction horizon in steps; `None` uses
    /// [`Snapshot::default_horizon_steps`].
    pub horizon_steps: Option<u64>,
    pub exact_cap: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { weights: ObjectiveWeights::default(), horizon_steps: None, exact_cap: EXACT_CAP }
    }
}

impl SchedulerConfig {
    fn predict(&self, snapshot: &Snapshot, strict: bool) -> PredictConfig {
        PredictConfig { horizon_steps: self.horizon_steps.unwrap_or_else(|| snapshot.default_horizon_steps()), strict }
    }
}

/// A crossing order with its predicted outcome.
#[derive(Debug, Clone)]
pub struct Schedule {
    /// Control-zone vehicles in crossing order.
    pub seq: Vec<Uid>,
    /// Predictions for merge-zone vehicles followed by `seq`.
    pub prediction: Prediction,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduledVehicle {
    pub id: VehicleId,
    pub t_m: Option<f64>,
    pub t_f: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleExport {
    pub t: f64,
    pub order: Vec<ScheduledVehicle>,
    /// `(a, b)`: conflicting vehicles with `a` crossing before `b`.
    pub precedence: Vec<(Uid, Uid)>,
}

impl Schedule {
    /// Vehicle ids with lane slots (1 = lane leader) in crossing order.
    pub fn ids(&self, snapshot: &Snapshot) -> Vec<VehicleId> {
        let mut slots: HashMap<Lane, u32> = HashMap::new();
        self.seq
            .iter()
            .map(|&uid| {
                let lane = snapshot.get(uid).map_or(0, |v| v.lane);
                let slot = slots.entry(lane).or_insert(0);
                *slot += 1;
                VehicleId { uid, lane, slot: *slot }
            })
            .collect()
    }

    pub fn precedence_pairs(&self, snapshot: &Snapshot) -> Vec<(Uid, Uid)> {
        let ids = self.ids(snapshot);
        let mut pairs = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                if snapshot.geometry.conflicts(a.lane, b.lane) {
                    pairs.push((a.uid, b.uid));
                }
            }
        }
        pairs
    }

    pub fn export(&self, snapshot: &Snapshot) -> ScheduleExport {
        let order = self
            .ids(snapshot)
            .into_iter()
            .map(|id| ScheduledVehicle {
                id,
                t_m: self.prediction.t_entry(id.uid),
                t_f: self.prediction.t_exit(id.uid).unwrap_or(INFEASIBLE),
            })
            .collect();
        ScheduleExport { t: snapshot.k as f64 * snapshot.dt, order, precedence: self.precedence_pairs(snapshot) }
    }

    pub fn to_json(&self, snapshot: &Snapshot) -> String {
        serde_json::to_string_pretty(&self.export(snapshot)).expect("schedule serialises")
    }
}

#[derive(Debug, Clone)]
pub struct CandidateEvaluation {
    /// Index in the previous control-zone order before which the new
    /// vehicle is placed (`len` = last).
    pub position: usize,
    pub seq: Vec<Uid>,
    pub objective: f64,
    /// `None` when prediction stopped at an infeasible vehicle.
    pub prediction: Option<Prediction>,
}

#[derive(Debug, Clone)]
pub struct InsertOutcome {
    pub schedule: Schedule,
    pub candidates: Vec<CandidateEvaluation>,
    /// Index into `candidates` of the chosen one.
    pub chosen: usize,
    /// Every candidate was infeasible; the new vehicle was put last.
    pub fallback: bool,
    pub baseline: Option<ObjectiveTerms>,
}

impl InsertOutcome {
    pub fn objective(&self) -> f64 {
        self.candidates[self.chosen].objective
    }
}

/// Insertion points for a vehicle on `lane`: right before each conflicting
/// vehicle after its own lane predecessor, and last.
pub fn candidate_positions(
    seq: &[Uid],
    lane: Lane,
    lane_of: impl Fn(Uid) -> Lane,
    geometry: &IntersectionGeometry,
) -> Vec<usize> {
    let start = seq.iter().rposition(|&u| lane_of(u) == lane).map_or(0, |i| i + 1);
    (start..seq.len())
        .filter(|&i| geometry.conflicts(lane, lane_of(seq[i])))
        .chain(std::iter::once(seq.len()))
        .collect()
}

fn lookup(snapshot: &Snapshot, uid: Uid) -> Result<&VehicleSnapshot, SchedulerError> {
    snapshot.get(uid).ok_or(SchedulerError::UnknownVehicle(uid))
}

fn check_seq(snapshot: &Snapshot, seq: &[Uid]) -> Result<(), SchedulerError> {
    for &u in seq {
        if lookup(snapshot, u)?.state.zone != Zone::Control {
            return Err(SchedulerError::UnknownVehicle(u));
        }
    }
    Ok(())
}

fn baseline_terms(
    snapshot: &Snapshot,
    seq: &[Uid],
    new: &VehicleSnapshot,
    reference: Option<&Prediction>,
    cfg: &SchedulerConfig,
) -> (Option<Prediction>, Option<ObjectiveTerms>) {
    let mut order = snapshot.merge_order();
    order.extend_from_slice(seq);
    match Predictor::new(snapshot, cfg.predict(snapshot, false)).predict(&order, &reference) {
        Ok(p) => {
            let terms = p.is_feasible().then(|| ObjectiveTerms::baseline(&p, new, &snapshot.geometry));
            (Some(p), terms)
        }
        Err(_) => (None, None),
    }
}

fn lenient(
    snapshot: &Snapshot,
    seq: Vec<Uid>,
    reuse: &impl ReuseSource,
    cfg: &SchedulerConfig,
) -> Result<Schedule, SchedulerError> {
    let mut order = snapshot.merge_order();
    order.extend_from_slice(&seq);
    match Predictor::new(snapshot, cfg.predict(snapshot, false)).predict(&order, reuse) {
        Ok(prediction) => Ok(Schedule { seq, prediction }),
        Err(PredictError::HorizonExceeded(u)) | Err(PredictError::Infeasible(u)) => {
            Err(SchedulerError::HorizonExceeded(u))
        }
    }
}

/// Insert `new` into the control-zone order `seq`, keeping everyone else's
/// relative order. `reference` is the previous schedule's prediction, used
/// only to skip recomputing unchanged trajectories.
pub fn insert(
    snapshot: &Snapshot,
    seq: &[Uid],
    new: Uid,
    reference: Option<&Prediction>,
    cfg: &SchedulerConfig,
) -> Result<InsertOutcome, SchedulerError> {
    check_seq(snapshot, seq)?;
    let nv = lookup(snapshot, new)?;
    let (base_pred, baseline) = baseline_terms(snapshot, seq, nv, reference, cfg);
    let merge = snapshot.merge_order();
    let lane_of = |u: Uid| snapshot.get(u).map_or(0, |v| v.lane);
    let positions = candidate_positions(seq, nv.lane, lane_of, &snapshot.geometry);

    let mut predictor = Predictor::new(snapshot, cfg.predict(snapshot, true));
    let reuse = (base_pred.as_ref(), reference);
    let mut candidates: Vec<CandidateEvaluation> = Vec::with_capacity(positions.len());
    let mut best: Option<usize> = None;
    for &n in &positions {
        let mut cand_seq = seq.to_vec();
        cand_seq.insert(n, new);
        let mut partial = Partial::new(&snapshot.geometry);
        let prefix = merge.len() + n;
        let mut ok = true;
        match &base_pred {
            Some(bp) => {
                for t in &bp.trajectories[..prefix] {
                    if !t.is_feasible() {
                        ok = false;
                        break;
                    }
                    partial.push(t.clone());
                }
            }
            None => {
                for &u in merge.iter().chain(&seq[..n]) {
                    if predictor.extend(&mut partial, u, &reuse).is_err() {
                        ok = false;
                        break;
                    }
                }
            }
        }
        if ok {
            for &u in std::iter::once(&new).chain(&seq[n..]) {
                if predictor.extend(&mut partial, u, &reuse).is_err() {
                    ok = false;
                    break;
                }
            }
        }
        let prediction = ok.then(|| partial.finish(snapshot.k, snapshot.dt));
        let obj = prediction.as_ref().map_or(INFEASIBLE, |p| objective(p, baseline.as_ref(), &cfg.weights));
        if obj < INFEASIBLE && best.is_none_or(|b: usize| obj < candidates[b].objective) {
            best = Some(candidates.len());
        }
        candidates.push(CandidateEvaluation { position: n, seq: cand_seq, objective: obj, prediction });
    }

    match best {
        Some(i) => {
            let c = &candidates[i];
            let schedule = Schedule { seq: c.seq.clone(), prediction: c.prediction.clone().expect("feasible") };
            Ok(InsertOutcome { schedule, candidates, chosen: i, fallback: false, baseline })
        }
        None => {
            let last = candidates.len() - 1;
            let schedule = lenient(snapshot, candidates[last].seq.clone(), &reuse, cfg)?;
            Ok(InsertOutcome { schedule, candidates, chosen: last, fallback: true, baseline })
        }
    }
}

/// Append `new` at the end of the order.
pub fn fifo(
    snapshot: &Snapshot,
    seq: &[Uid],
    new: Uid,
    reference: Option<&Prediction>,
    cfg: &SchedulerConfig,
) -> Result<Schedule, SchedulerError> {
    check_seq(snapshot, seq)?;
    lookup(snapshot, new)?;
    let mut s = seq.to_vec();
    s.push(new);
    lenient(snapshot, s, &reference, cfg)
}

#[derive(Debug, Clone)]
pub struct ExactOutcome {
    pub schedule: Schedule,
    pub objective: f64,
    /// Complete orders scored.
    pub evaluated: usize,
    /// Orders discarded because a prefix was already infeasible.
    pub pruned: usize,
    /// No feasible order existed; `schedule` puts the new vehicle last.
    pub fallback: bool,
}

/// Best order over every interleaving of the control-zone lanes (within-lane
/// order fixed), scored against `seq` without `new`.
pub fn exact(
    snapshot: &Snapshot,
    seq: &[Uid],
    new: Uid,
    reference: Option<&Prediction>,
    cfg: &SchedulerConfig,
) -> Result<ExactOutcome, SchedulerError> {
    check_seq(snapshot, seq)?;
    let nv = lookup(snapshot, new)?;
    let n = seq.len() + 1;
    if n > cfg.exact_cap {
        return Err(SchedulerError::TooLarge { n, cap: cfg.exact_cap });
    }
    let (base_pred, baseline) = baseline_terms(snapshot, seq, nv, reference, cfg);

    let mut queues: Vec<Vec<Uid>> = vec![Vec::new(); snapshot.geometry.lane_count()];
    for &u in seq.iter().chain(std::iter::once(&new)) {
        queues[lookup(snapshot, u)?.lane - 1].push(u);
    }
    let mut predictor = Predictor::new(snapshot, cfg.predict(snapshot, true));
    let mut partial = Partial::new(&snapshot.geometry);
    let reuse = (base_pred.as_ref(), reference);
    for u in snapshot.merge_order() {
        if predictor.extend(&mut partial, u, &reuse).is_err() {
            let schedule = lenient(snapshot, [seq, &[new]].concat(), &reuse, cfg)?;
            return Ok(ExactOutcome { schedule, objective: INFEASIBLE, evaluated: 0, pruned: 0, fallback: true });
        }
    }

    let mut search = Search {
        predictor,
        reuse,
        queues,
        heads: vec![0; snapshot.geometry.lane_count()],
        order: Vec::with_capacity(n),
        baseline: baseline.as_ref(),
        weights: cfg.weights,
        best: None,
        evaluated: 0,
        pruned: 0,
    };
    search.dfs(partial);
    let (evaluated, pruned) = (search.evaluated, search.pruned);
    match search.best {
        Some((objective, seq, prediction)) => {
            Ok(ExactOutcome { schedule: Schedule { seq, prediction }, objective, evaluated, pruned, fallback: false })
        }
        None => {
            let schedule = lenient(snapshot, [seq, &[new]].concat(), &reuse, cfg)?;
            Ok(ExactOutcome { schedule, objective: INFEASIBLE, evaluated, pruned, fallback: true })
        }
    }
}

struct Search<'a, R> {
    predictor: Predictor<'a>,
    reuse: R,
    queues: Vec<Vec<Uid>>,
    heads: Vec<usize>,
    order: Vec<Uid>,
    baseline: Option<&'a ObjectiveTerms>,
    weights: ObjectiveWeights,
    best: Option<(f64, Vec<Uid>, Prediction)>,
    evaluated: usize,
    pruned: usize,
}

impl<R: ReuseSource> Search<'_, R> {
    /// Interleavings of what is left in the queues.
    fn completions(&self) -> usize {
        let mut total = 0;
        let mut ways = 1usize;
        for (q, &h) in self.queues.iter().zip(&self.heads) {
            for i in 1..=q.len() - h {
                total += 1;
                ways = ways * total / i;
            }
        }
        ways
    }

    fn dfs(&mut self, partial: Partial) {
        let mut leaf = true;
        for lane in 0..self.queues.len() {
            let Some(&u) = self.queues[lane].get(self.heads[lane]) else { continue };
            leaf = false;
            let mut next = partial.clone();
            self.heads[lane] += 1;
            if self.predictor.extend(&mut next, u, &self.reuse).is_err() {
                self.pruned += self.completions();
                self.heads[lane] -= 1;
                continue;
            }
            self.order.push(u);
            self.dfs(next);
            self.order.pop();
            self.heads[lane] -= 1;
        }
        if leaf {
            self.evaluated += 1;
            let snapshot = self.predictor.snapshot();
            let prediction = partial.finish(snapshot.k, snapshot.dt);
            let obj = objective(&prediction, self.baseline, &self.weights);
            if obj < self.best.as_ref().map_or(INFEASIBLE, |b| b.0) {
                self.best = Some((obj, self.order.clone(), prediction));
            }
        }
    }
}
