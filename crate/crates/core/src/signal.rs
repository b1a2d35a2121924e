//! Per-lane traffic lights derived from the crossing order.
//!
//! A lane is green for its lead vehicle once every conflicting vehicle
//! scheduled ahead of it has left the merge zone. A lane with nothing in its
//! control zone is red.

use std::io::Write;

use serde::Serialize;

use crate::dynamics::Phase;
use crate::model::{IntersectionGeometry, Lane, Uid, VehicleId};
use crate::scheduler::predict::Prediction;
use crate::sim::agent::Zone;

/// Largest slot among lane-`k` vehicles that precede `vehicle` in `order`,
/// or 0 if none does.
pub fn j_index(order: &[VehicleId], vehicle: Uid, k: Lane) -> u32 {
    order.iter().take_while(|v| v.uid != vehicle).filter(|v| v.lane == k).map(|v| v.slot).max().unwrap_or(0)
}

/// Green-switch time of `vehicle`: the latest exit among conflicting
/// vehicles ahead of it in `order`, or `activation` if there are none.
pub fn green_time(
    order: &[VehicleId],
    geometry: &IntersectionGeometry,
    vehicle: Uid,
    exit_time: impl Fn(Uid) -> f64,
    activation: f64,
) -> f64 {
    let Some(me) = order.iter().find(|v| v.uid == vehicle) else {
        return activation;
    };
    order
        .iter()
        .take_while(|v| v.uid != vehicle)
        .filter(|v| geometry.conflicts(me.lane, v.lane))
        .map(|v| exit_time(v.uid))
        .fold(activation, f64::max)
}

/// Phases at one step from the control-zone order (`seq`, as lanes) and
/// which lanes currently have a vehicle in the merge zone.
pub fn event_phases(geometry: &IntersectionGeometry, seq: &[Lane], merge_occupied: &[bool]) -> Vec<Phase> {
    geometry
        .lanes()
        .map(|j| {
            let Some(lead) = seq.iter().position(|&l| l == j) else {
                return Phase::Red;
            };
            let blocked = geometry.conflicting(j).iter().any(|&c| merge_occupied[c - 1])
                || seq[..lead].iter().any(|&l| geometry.conflicts(j, l));
            if blocked {
                Phase::Red
            } else {
                Phase::Green
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseInterval {
    pub t_from: f64,
    pub t_to: f64,
    pub phase: Phase,
}

/// Red/green intervals per lane. Intervals are contiguous from the first
/// recorded step; times outside them read as red.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTimeline {
    lanes: Vec<Vec<PhaseInterval>>,
}

impl SignalTimeline {
    pub fn new(lane_count: usize) -> Self {
        Self { lanes: vec![Vec::new(); lane_count] }
    }

    /// Record `phases` (one per lane) holding over `[t, t + dt)`.
    pub fn record(&mut self, t: f64, dt: f64, phases: &[Phase]) {
        for (intervals, &phase) in self.lanes.iter_mut().zip(phases) {
            match intervals.last_mut() {
                Some(last) if last.phase == phase => last.t_to = t + dt,
                _ => intervals.push(PhaseInterval { t_from: t, t_to: t + dt, phase }),
            }
        }
    }

    /// Timeline implied by a prediction: from its snapshot step until the
    /// last predicted exit.
    pub fn from_prediction(prediction: &Prediction, geometry: &IntersectionGeometry) -> Self {
        let dt = prediction.dt;
        let mut timeline = Self::new(geometry.lane_count());
        let end = prediction.trajectories.iter().map(|t| t.k_exit).max().unwrap_or(prediction.k0);
        let mut seq = Vec::new();
        let mut merge = vec![false; geometry.lane_count()];
        for k in prediction.k0..end {
            seq.clear();
            merge.iter_mut().for_each(|m| *m = false);
            for t in &prediction.trajectories {
                match t.zone_at(k) {
                    Zone::Control => seq.push(t.lane),
                    Zone::Merge => merge[t.lane - 1] = true,
                    Zone::Exited => {}
                }
            }
            timeline.record(k as f64 * dt, dt, &event_phases(geometry, &seq, &merge));
        }
        timeline
    }

    pub fn intervals(&self, lane: Lane) -> &[PhaseInterval] {
        &self.lanes[lane - 1]
    }

    pub fn phase_at(&self, lane: Lane, t: f64) -> Phase {
        let intervals = &self.lanes[lane - 1];
        let i = intervals.partition_point(|iv| iv.t_to <= t);
        match intervals.get(i) {
            Some(iv) if iv.t_from <= t => iv.phase,
            _ => Phase::Red,
        }
    }

    /// CSV with columns `lane,t_from,t_to,phase`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lane", "t_from", "t_to", "phase"])?;
        for (j, intervals) in self.lanes.iter().enumerate() {
            for iv in intervals {
                w.write_record([
                    (j + 1).to_string(),
                    format!("{:.2}", iv.t_from),
                    format!("{:.2}", iv.t_to),
                    iv.phase.as_str().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(uid: u32, lane: Lane, slot: u32) -> VehicleId {
        VehicleId { uid: Uid(uid), lane, slot }
    }

    /// `{v11, v12, v21, v22, v23, v13}` on a two-lane crossing.
    fn relaxed() -> Vec<VehicleId> {
        vec![id(1, 1, 1), id(2, 1, 2), id(3, 2, 1), id(4, 2, 2), id(5, 2, 3), id(6, 1, 3)]
    }

    #[test]
    fn j_index_reads_off_the_order() {
        let order = relaxed();
        assert_eq!(j_index(&order, Uid(6), 2), 3);
        assert_eq!(j_index(&order, Uid(3), 1), 2);
        assert_eq!(j_index(&order, Uid(1), 2), 0);
    }

    #[test]
    fn green_time_is_latest_conflicting_exit() {
        let g = IntersectionGeometry::two_way(300.0, 100.0, 100.0).unwrap();
        let order = relaxed();
        let exits = |u: Uid| 10.0 + u.0 as f64;
        assert_eq!(green_time(&order, &g, Uid(6), exits, 0.0), 15.0);
        assert_eq!(green_time(&order, &g, Uid(1), exits, 3.0), 3.0);
        let order = vec![id(1, 2, 1), id(2, 4, 1), id(3, 1, 1)];
        let g4 = IntersectionGeometry::four_way(300.0, 100.0, 100.0).unwrap();
        let exits = |u: Uid| if u.0 == 1 { 30.0 } else { 32.0 };
        assert_eq!(green_time(&order, &g4, Uid(3), exits, 0.0), 32.0);
    }

    #[test]
    fn event_phases_rules() {
        let g = IntersectionGeometry::four_way(300.0, 100.0, 100.0).unwrap();
        // Empty lanes are red; non-conflicting lanes may share green.
        let p = event_phases(&g, &[1, 3, 2], &[false; 4]);
        assert_eq!(p, vec![Phase::Green, Phase::Red, Phase::Green, Phase::Red]);
        // A lane-2 vehicle in the merge zone holds lanes 1 and 3 red.
        let p = event_phases(&g, &[1, 3], &[false, true, false, false]);
        assert_eq!(p, vec![Phase::Red; 4]);
    }

    #[test]
    fn timeline_lookup_and_csv() {
        let mut tl = SignalTimeline::new(2);
        for k in 0..10 {
            let phase = if k < 4 { Phase::Red } else { Phase::Green };
            tl.record(k as f64, 1.0, &[phase, Phase::Red]);
        }
        assert_eq!(tl.intervals(1).len(), 2);
        assert_eq!(tl.phase_at(1, 3.5), Phase::Red);
        assert_eq!(tl.phase_at(1, 4.0), Phase::Green);
        assert_eq!(tl.phase_at(1, 10.0), Phase::Red);
        assert_eq!(tl.phase_at(2, 5.0), Phase::Red);
        let mut buf = Vec::new();
        tl.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("lane,t_from,t_to,phase"));
        assert!(text.contains("1,4.00,10.00,GREEN"));
    }
}
