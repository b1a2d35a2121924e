//! Declarative configuration (TOML) and parameter sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, SimError};
use crate::model::{IntersectionGeometry, VehicleParams};
use crate::scheduler::{Mode, ObjectiveWeights};
use crate::sim::arrivals::{parse_scripted, Arrival, ArrivalSource};
use crate::sim::world::{self, summary_header, RunMetrics, SimConfig, Spread};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LaneLayout {
    #[default]
    FourWay,
    TwoWay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryFile {
    pub control_len: f64,
    pub merge_len: f64,
    pub visibility: f64,
}

impl Default for GeometryFile {
    fn default() -> Self {
        Self { control_len: 300.0, merge_len: 100.0, visibility: 100.0 }
    }
}

/// Per-class overrides of the default vehicle parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub u_min: Option<f64>,
    pub u_max: Option<f64>,
    pub a_h: Option<f64>,
    pub headway: Option<f64>,
    pub s0: Option<f64>,
    pub t_react: Option<f64>,
}

impl ParamsFile {
    fn apply(&self, mut p: VehicleParams) -> VehicleParams {
        let set = |x: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *x = v;
            }
        };
        set(&mut p.v_min, self.v_min);
        set(&mut p.v_max, self.v_max);
        set(&mut p.u_min, self.u_min);
        set(&mut p.u_max, self.u_max);
        set(&mut p.a_h, self.a_h);
        set(&mut p.headway, self.headway);
        set(&mut p.s0, self.s0);
        set(&mut p.t_react, self.t_react);
        p
    }

    fn full(p: &VehicleParams) -> Self {
        Self {
            v_min: Some(p.v_min),
            v_max: Some(p.v_max),
            u_min: Some(p.u_min),
            u_max: Some(p.u_max),
            a_h: Some(p.a_h),
            headway: Some(p.headway),
            s0: Some(p.s0),
            t_react: Some(p.t_react),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalKind {
    #[default]
    Poisson,
    Batch,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// AV share, `1 - p_hdv`.
    Penetration,
    /// Robust prediction headway.
    R1,
    /// Speed limit for both classes (initial speed capped to it).
    VMax,
    /// Batch size of the AV/HDV arrival pattern.
    BatchK,
    /// Position-noise half-width.
    Noise,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Penetration => "penetration",
            SweepAxis::R1 => "r1",
            SweepAxis::VMax => "v_max",
            SweepAxis::BatchK => "batch_k",
            SweepAxis::Noise => "noise",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &SimConfig, value: f64) -> Result<SimConfig, String> {
        let mut c = base.clone();
        match self {
            SweepAxis::Penetration => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(format!("penetration {value} outside [0, 1]"));
                }
                c.p_hdv = 1.0 - value;
            }
            SweepAxis::R1 => c.robust_r1 = Some(value),
            SweepAxis::VMax => {
                if !(value > 0.0) {
                    return Err(format!("v_max {value} must be > 0"));
                }
                c.hdv.v_max = value;
                c.av.v_max = value;
                c.v_initial = c.v_initial.min(value);
            }
            SweepAxis::BatchK => {
                if value.fract() != 0.0 || value < 2.0 {
                    return Err(format!("batch k {value} must be an integer >= 2"));
                }
                let hdv_first = matches!(c.arrivals, ArrivalSource::Batch { hdv_first: true, .. });
                c.arrivals = ArrivalSource::Batch { k: value as usize, hdv_first };
            }
            SweepAxis::Noise => c.position_noise = Some(value),
        }
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
}

fn default_runs() -> usize {
    1
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::Relaxed, Mode::Fifo]
}

/// On-disk configuration. Every field has the built-in default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: u64,
    pub mode: Mode,
    pub dt: f64,
    pub horizon: f64,
    pub drain_limit: f64,
    pub mean_interarrival: f64,
    pub p_hdv: f64,
    pub v_initial: f64,
    pub lanes: LaneLayout,
    pub exact_cap: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust_r1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hdv_headway_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position_noise: Option<f64>,
    pub arrivals: ArrivalKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_k: Option<usize>,
    pub batch_hdv_first: bool,
    /// CSV of scripted arrivals, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scripted: Option<String>,
    pub geometry: GeometryFile,
    pub weights: ObjectiveWeights,
    pub hdv: ParamsFile,
    pub av: ParamsFile,
    /// Inline scripted arrivals.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub arrival: Vec<Arrival>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepFile>,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            seed: d.seed,
            mode: d.mode,
            dt: d.dt,
            horizon: d.horizon,
            drain_limit: d.drain_limit,
            mean_interarrival: d.mean_interarrival,
            p_hdv: d.p_hdv,
            v_initial: d.v_initial,
            lanes: LaneLayout::FourWay,
            exact_cap: d.exact_cap,
            robust_r1: None,
            hdv_headway_range: None,
            position_noise: None,
            arrivals: ArrivalKind::Poisson,
            batch_k: None,
            batch_hdv_first: false,
            scripted: None,
            geometry: GeometryFile::default(),
            weights: d.weights,
            hdv: ParamsFile::default(),
            av: ParamsFile::default(),
            arrival: Vec::new(),
            sweep: None,
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        Self::parse(&text, &p)
    }

    /// Resolve into a simulation config; relative paths are taken from
    /// `base_dir`.
    pub fn to_sim(&self, path: &str, base_dir: &Path) -> Result<SimConfig, ConfigError> {
        let field = |field: &str, message: String| ConfigError::Field {
            path: path.to_string(),
            field: field.to_string(),
            message,
        };
        let g = &self.geometry;
        let geometry = match self.lanes {
            LaneLayout::FourWay => IntersectionGeometry::four_way(g.control_len, g.merge_len, g.visibility),
            LaneLayout::TwoWay => IntersectionGeometry::two_way(g.control_len, g.merge_len, g.visibility),
        }
        .map_err(|e| field("geometry", e.to_string()))?;
        let arrivals = match self.arrivals {
            ArrivalKind::Poisson => ArrivalSource::Poisson,
            ArrivalKind::Batch => ArrivalSource::Batch {
                k: self.batch_k.ok_or_else(|| field("batch_k", "required when arrivals = \"batch\"".into()))?,
                hdv_first: self.batch_hdv_first,
            },
            ArrivalKind::Scripted => {
                let mut list = self.arrival.clone();
                if let Some(file) = &self.scripted {
                    let full = base_dir.join(file);
                    let p = full.display().to_string();
                    let f = fs::File::open(&full).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                    list.extend(parse_scripted(f, &p, geometry.lane_count())?);
                }
                list.sort_by(|a, b| a.t0.total_cmp(&b.t0));
                ArrivalSource::Scripted { arrivals: list }
            }
        };
        let cfg = SimConfig {
            geometry,
            hdv: self.hdv.apply(VehicleParams::default_hdv()),
            av: self.av.apply(VehicleParams::default_av()),
            dt: self.dt,
            horizon: self.horizon,
            drain_limit: self.drain_limit,
            mean_interarrival: self.mean_interarrival,
            p_hdv: self.p_hdv,
            v_initial: self.v_initial,
            weights: self.weights,
            seed: self.seed,
            mode: self.mode,
            robust_r1: self.robust_r1,
            hdv_headway_range: self.hdv_headway_range,
            position_noise: self.position_noise,
            arrivals,
            exact_cap: self.exact_cap,
        };
        cfg.validate().map_err(|e| field("config", e.to_string()))?;
        if let Some(s) = &self.sweep {
            if s.runs == 0 {
                return Err(field("sweep.runs", "must be >= 1".into()));
            }
            for &v in &s.values {
                s.axis.apply(&cfg, v).map_err(|m| field("sweep.values", m))?;
            }
        }
        Ok(cfg)
    }

    /// The file form of `cfg` (scripted arrivals are written inline).
    pub fn from_sim(cfg: &SimConfig) -> Self {
        let lanes = if cfg.geometry.lane_count() == 2 { LaneLayout::TwoWay } else { LaneLayout::FourWay };
        let (arrivals, batch_k, batch_hdv_first, arrival) = match &cfg.arrivals {
            ArrivalSource::Poisson => (ArrivalKind::Poisson, None, false, Vec::new()),
            ArrivalSource::Batch { k, hdv_first } => (ArrivalKind::Batch, Some(*k), *hdv_first, Vec::new()),
            ArrivalSource::Scripted { arrivals } => (ArrivalKind::Scripted, None, false, arrivals.clone()),
        };
        Self {
            seed: cfg.seed,
            mode: cfg.mode,
            dt: cfg.dt,
            horizon: cfg.horizon,
            drain_limit: cfg.drain_limit,
            mean_interarrival: cfg.mean_interarrival,
            p_hdv: cfg.p_hdv,
            v_initial: cfg.v_initial,
            lanes,
            exact_cap: cfg.exact_cap,
            robust_r1: cfg.robust_r1,
            hdv_headway_range: cfg.hdv_headway_range,
            position_noise: cfg.position_noise,
            arrivals,
            batch_k,
            batch_hdv_first,
            scripted: None,
            geometry: GeometryFile {
                control_len: cfg.geometry.control_len,
                merge_len: cfg.geometry.merge_len,
                visibility: cfg.geometry.visibility,
            },
            weights: cfg.weights,
            hdv: ParamsFile::full(&cfg.hdv),
            av: ParamsFile::full(&cfg.av),
            arrival,
            sweep: None,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// A sweep over one axis, each point run for every mode and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub base: SimConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub runs: usize,
    pub modes: Vec<Mode>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub axis: SweepAxis,
    pub value: f64,
    pub mode: Mode,
    pub runs: usize,
    pub mean_delay: Spread,
    pub max_delay: Spread,
    pub mean_entry_velocity: Spread,
    pub t_final: Spread,
    pub throughput: Spread,
    pub safety_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub points: Vec<PointSummary>,
    /// `|u|` histogram summed over all runs, per mode.
    pub accel_histogram: BTreeMap<String, Vec<u64>>,
}

/// Run every sweep point and write `metrics.csv` (one row per point, mode
/// and seed), `summary.json`, `long.csv` (tidy per-point means) and
/// `config.toml` (the base config) to `spec.out`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, SimError> {
    let io = |e: std::io::Error| SimError::Config(format!("{}: {e}", spec.out.display()));
    fs::create_dir_all(&spec.out).map_err(io)?;
    fs::write(spec.out.join("config.toml"), ConfigFile::from_sim(&spec.base).to_toml()).map_err(io)?;

    let mut rows = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["axis", "value"];
    header.extend(summary_header());
    header.push("safety_violation");
    rows.write_record(&header).map_err(csv_err)?;

    let mut points = Vec::new();
    let mut hist: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for &value in &spec.values {
        for &mode in &spec.modes {
            let mut cfg = spec.axis.apply(&spec.base, value).map_err(SimError::Config)?;
            cfg.mode = mode;
            let mut runs: Vec<RunMetrics> = Vec::new();
            let mut violations = 0;
            for s in 0..spec.runs as u64 {
                let c = SimConfig { seed: spec.base.seed + s, ..cfg.clone() };
                let mut row = vec![spec.axis.as_str().to_string(), value.to_string()];
                match world::run(&c) {
                    Ok(out) => {
                        let h = hist.entry(mode.as_str().to_string()).or_insert_with(|| vec![0; world::ACCEL_BINS]);
                        for (a, b) in h.iter_mut().zip(&out.metrics.accel_histogram) {
                            *a += b;
                        }
                        row.extend(out.metrics.summary_row());
                        row.push(String::new());
                        runs.push(out.metrics);
                    }
                    Err(SimError::Safety(v)) => {
                        violations += 1;
                        row.push(c.seed.to_string());
                        row.push(mode.as_str().to_string());
                        row.resize(header.len() - 1, String::new());
                        row.push(v.to_string());
                    }
                    Err(e) => return Err(SimError::Seeded { seed: c.seed, source: Box::new(e) }),
                }
                rows.write_record(&row).map_err(csv_err)?;
            }
            let col = |f: fn(&RunMetrics) -> f64| Spread::of(&runs.iter().map(f).collect::<Vec<_>>());
            points.push(PointSummary {
                axis: spec.axis,
                value,
                mode,
                runs: runs.len(),
                mean_delay: col(|r| r.mean_delay),
                max_delay: col(|r| r.max_delay),
                mean_entry_velocity: col(|r| r.mean_entry_velocity),
                t_final: col(|r| r.t_final),
                throughput: col(|r| r.throughput as f64),
                safety_violations: violations,
            });
        }
    }
    let bytes = rows.into_inner().map_err(|e| SimError::Config(e.to_string()))?;
    fs::write(spec.out.join("metrics.csv"), bytes).map_err(io)?;

    let mut long = csv::Writer::from_writer(Vec::new());
    long.write_record(["axis", "value", "mode", "metric", "mean", "std"]).map_err(csv_err)?;
    for p in &points {
        for (name, s) in [
            ("mean_delay", &p.mean_delay),
            ("max_delay", &p.max_delay),
            ("mean_entry_velocity", &p.mean_entry_velocity),
            ("t_final", &p.t_final),
            ("throughput", &p.throughput),
        ] {
            long.write_record([
                p.axis.as_str().to_string(),
                p.value.to_string(),
                p.mode.as_str().to_string(),
                name.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = long.into_inner().map_err(|e| SimError::Config(e.to_string()))?;
    fs::write(spec.out.join("long.csv"), bytes).map_err(io)?;

    let report = ExperimentReport { points, accel_histogram: hist };
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    fs::write(spec.out.join("summary.json"), json).map_err(io)?;
    Ok(report)
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let f = ConfigFile::parse("", "empty.toml").unwrap();
        let c = f.to_sim("empty.toml", Path::new(".")).unwrap();
        assert_eq!(c, SimConfig::default());
        assert_eq!(c.geometry.control_len, 300.0);
        assert_eq!(c.hdv.headway, 2.5);
        assert_eq!(c.av.headway, 1.5);
        assert_eq!(c.hdv.t_react, 1.0);
        assert_eq!(c.horizon, 3600.0);
    }

    #[test]
    fn parse_errors_name_the_location() {
        let e = ConfigFile::parse("horizon = \"long\"\n", "a.toml").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("a.toml") && msg.contains("line 1"), "{msg}");
        let e = ConfigFile::parse("p_hdv = 0.5\nbogus = 1\n", "b.toml").unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let f = ConfigFile::parse("p_hdv = 1.5\n", "c.toml").unwrap();
        let e = f.to_sim("c.toml", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("p_hdv"), "{e}");
        let f = ConfigFile::parse("arrivals = \"batch\"\n", "d.toml").unwrap();
        assert!(f.to_sim("d.toml", Path::new(".")).unwrap_err().to_string().contains("batch_k"));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
            seed = 9
            mode = "fifo"
            horizon = 120.0
            lanes = "two_way"
            robust_r1 = 4.0
            hdv_headway_range = [2.0, 4.0]
            arrivals = "scripted"
            [weights]
            w1 = 0.0
            w2 = 0.01
            w3 = 0.0
            w4 = 10.0
            [av]
            headway = 1.2
            [[arrival]]
            t0 = 1.0
            lane = 2
            class = "AV"
            v_initial = 20.0
        "#;
        let c = ConfigFile::parse(text, "x").unwrap().to_sim("x", Path::new(".")).unwrap();
        assert_eq!(c.av.headway, 1.2);
        assert_eq!(c.geometry.lane_count(), 2);
        let again =
            ConfigFile::parse(&ConfigFile::from_sim(&c).to_toml(), "y").unwrap().to_sim("y", Path::new(".")).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn sweep_axes_apply() {
        let base = SimConfig::default();
        assert_eq!(SweepAxis::Penetration.apply(&base, 0.9).unwrap().p_hdv, 1.0 - 0.9);
        let c = SweepAxis::VMax.apply(&base, 15.0).unwrap();
        assert_eq!((c.hdv.v_max, c.av.v_max, c.v_initial), (15.0, 15.0, 15.0));
        assert!(matches!(SweepAxis::BatchK.apply(&base, 4.0).unwrap().arrivals, ArrivalSource::Batch { k: 4, .. }));
        assert!(SweepAxis::BatchK.apply(&base, 3.0).is_err());
        assert!(SweepAxis::Penetration.apply(&base, 1.5).is_err());
    }
}
