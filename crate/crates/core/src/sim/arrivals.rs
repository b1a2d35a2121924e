//! Arrival streams: per-lane Poisson processes, batch class patterns and
//! scripted lists.

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::model::{Lane, VehicleClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub t0: f64,
    pub lane: Lane,
    pub class: VehicleClass,
    pub v_initial: f64,
}

/// How arrival times and classes are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalSource {
    /// Independent Poisson process per lane; each vehicle is an HDV with
    /// probability `p_hdv`.
    Poisson,
    /// Poisson times; classes repeat in blocks of `k` per lane, half AV then
    /// half HDV (or the reverse with `hdv_first`).
    Batch {
        k: usize,
        hdv_first: bool,
    },
    Scripted {
        arrivals: Vec<Arrival>,
    },
}

/// RNG streams, one per purpose, so that e.g. changing `p_hdv` leaves the
/// arrival times untouched.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub(crate) const STREAM_CLASS: u64 = 100;
pub(crate) const STREAM_HEADWAY: u64 = 101;
pub(crate) const STREAM_NOISE: u64 = 102;

/// Arrivals in `[0, horizon)`, sorted by time then lane.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    source: &ArrivalSource,
    lanes: usize,
    horizon: f64,
    mean_interarrival: f64,
    p_hdv: f64,
    v_initial: f64,
    seed: u64,
) -> Vec<Arrival> {
    let mut out = match source {
        ArrivalSource::Scripted { arrivals } => arrivals.iter().filter(|a| a.t0 < horizon).copied().collect(),
        ArrivalSource::Poisson | ArrivalSource::Batch { .. } => {
            let mut class_rng = stream(seed, STREAM_CLASS);
            let exp = Exp::new(1.0 / mean_interarrival).expect("positive mean inter-arrival");
            let mut out = Vec::new();
            for lane in 1..=lanes {
                let mut rng = stream(seed, lane as u64);
                let mut t = 0.0;
                let mut i = 0usize;
                loop {
                    t += exp.sample(&mut rng);
                    if t >= horizon {
                        break;
                    }
                    let class = match source {
                        ArrivalSource::Batch { k, hdv_first } => {
                            let first_half = (i % k.max(&1)) < k / 2;
                            if first_half != *hdv_first {
                                VehicleClass::Av
                            } else {
                                VehicleClass::Hdv
                            }
                        }
                        _ => {
                            if class_rng.gen::<f64>() < p_hdv {
                                VehicleClass::Hdv
                            } else {
                                VehicleClass::Av
                            }
                        }
                    };
                    out.push(Arrival { t0: t, lane, class, v_initial });
                    i += 1;
                }
            }
            out
        }
    };
    out.sort_by(|a, b| a.t0.total_cmp(&b.t0).then(a.lane.cmp(&b.lane)));
    out
}

#[derive(Debug, Deserialize)]
struct Row {
    t0: f64,
    lane: Lane,
    class: String,
    v_initial: f64,
}

/// Parse `t0,lane,class,v_initial` rows (with header). Rows are stably
/// sorted by `t0`. Errors name the 1-based data row.
pub fn parse_scripted<R: Read>(input: R, path: &str, lanes: usize) -> Result<Vec<Arrival>, ConfigError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<Row>().enumerate() {
        let row = i + 1;
        let err = |message: String| ConfigError::Row { path: path.to_string(), row, message };
        let r = rec.map_err(|e| err(e.to_string()))?;
        let class: VehicleClass = r.class.parse().map_err(|e: crate::error::ModelError| err(e.to_string()))?;
        if !(r.t0 >= 0.0 && r.t0.is_finite()) {
            return Err(err(format!("t0 must be a finite time >= 0, got {}", r.t0)));
        }
        if r.lane == 0 || r.lane > lanes {
            return Err(err(format!("lane {} outside 1..={lanes}", r.lane)));
        }
        if !(r.v_initial >= 0.0 && r.v_initial.is_finite()) {
            return Err(err(format!("v_initial must be >= 0, got {}", r.v_initial)));
        }
        out.push(Arrival { t0: r.t0, lane: r.lane, class, v_initial: r.v_initial });
    }
    out.sort_by(|a, b| a.t0.total_cmp(&b.t0));
    Ok(out)
}
