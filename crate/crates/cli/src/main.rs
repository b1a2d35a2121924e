use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use mixcross::experiment::{run_experiment, ConfigFile, ExperimentSpec};
use mixcross::model::Uid;
use mixcross::scheduler::Mode;
use mixcross::sim::world::summary_header;
use mixcross::sim::{batch, parse_scripted, run_with, ArrivalSource, RunOptions, SimConfig};
use mixcross::SimError;

#[derive(Parser)]
#[command(name = "mixcross", version, about = "Mixed-autonomy intersection scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds, starting at --seed.
    #[arg(long)]
    runs: Option<usize>,
    /// relaxed, fifo or exact.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration.
    Run {
        #[command(flatten)]
        common: Common,
        /// Trajectory log interval in steps (0 disables the log).
        #[arg(long, default_value_t = 10)]
        log_every: u64,
    },
    /// Run the `[sweep]` section of a configuration.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Replay a scripted arrival CSV (t0,lane,class,v_initial) under every
    /// mode, or only --mode.
    Replay {
        arrivals: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Audit a trajectory log for merge-zone conflicts and overlaps.
    Validate {
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Config(anyhow::Error),
    Safety(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<SimError>() {
            Some(SimError::Safety(_)) => Failure::Safety(e),
            Some(SimError::Seeded { source, .. }) if matches!(**source, SimError::Safety(_)) => Failure::Safety(e),
            _ => Failure::Config(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { common, log_every } => cmd_run(&common, log_every),
        Command::Sweep { common } => cmd_sweep(&common),
        Command::Replay { arrivals, common } => cmd_replay(&arrivals, &common),
        Command::Validate { log, common } => cmd_validate(&log, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Safety(e)) => {
            eprintln!("safety violation: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load(common: &Common) -> Result<(ConfigFile, SimConfig)> {
    let (file, path, dir) = match &common.config {
        Some(p) => {
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (ConfigFile::load(p)?, p.display().to_string(), dir)
        }
        None => (ConfigFile::default(), "<defaults>".to_string(), PathBuf::from(".")),
    };
    let mut cfg = file.to_sim(&path, &dir)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = common.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok((file, cfg))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| anyhow!("csv: {e}"))?;
    Ok(buf)
}

/// Run one config and write its logs under `dir`.
fn run_one(cfg: &SimConfig, dir: &Path, log_every: u64) -> Result<mixcross::sim::RunMetrics, Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let opts = RunOptions { trajectory_every: (log_every > 0).then_some(log_every), keep_schedules: true };
    let out = run_with(cfg, opts).map_err(|e| Failure::from(anyhow::Error::new(e)))?;
    write(&dir.join("vehicles.csv"), csv_bytes(|b| out.metrics.write_vehicle_csv(b))?)?;
    write(&dir.join("summary.csv"), csv_bytes(|b| out.metrics.write_summary_csv(b))?)?;
    write(&dir.join("signals.csv"), csv_bytes(|b| out.signals.write_csv(b))?)?;
    if log_every > 0 {
        write(&dir.join("trajectory.csv"), csv_bytes(|b| out.write_trajectory_csv(b))?)?;
    }
    write(&dir.join("metrics.json"), serde_json::to_string_pretty(&out.metrics).map_err(anyhow::Error::new)?)?;
    write(&dir.join("schedules.jsonl"), out.schedules.iter().map(|s| s.replace('\n', "") + "\n").collect::<String>())?;
    write(&dir.join("config.toml"), ConfigFile::from_sim(cfg).to_toml())?;
    Ok(out.metrics)
}

fn report(tag: &str, m: &mixcross::sim::RunMetrics) {
    println!(
        "{tag} seed={} mode={} arrived={} exited={} in_flight={} mean_delay={:.3} max_delay={:.3} mean_entry_v={:.3} t_final={:.2}",
        m.seed,
        m.mode.as_str(),
        m.arrived,
        m.throughput,
        m.in_flight,
        m.mean_delay,
        m.max_delay,
        m.mean_entry_velocity,
        m.t_final
    );
}

fn cmd_run(common: &Common, log_every: u64) -> Result<(), Failure> {
    let (_, cfg) = load(common)?;
    let runs = common.runs.unwrap_or(1);
    if runs <= 1 {
        let m = run_one(&cfg, &common.out, log_every)?;
        report("run", &m);
        return Ok(());
    }
    let b = batch(&cfg, runs).map_err(|e| Failure::from(anyhow::Error::new(e)))?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(summary_header()).map_err(anyhow::Error::new)?;
    for m in &b.runs {
        report("run", m);
        w.write_record(m.summary_row()).map_err(anyhow::Error::new)?;
    }
    let w = w.into_inner().map_err(|e| anyhow!("csv: {e}"))?;
    write(&common.out.join("runs.csv"), w)?;
    write(&common.out.join("batch.json"), serde_json::to_string_pretty(&b).map_err(anyhow::Error::new)?)?;
    println!(
        "batch runs={} mean_delay={:.3}±{:.3} t_final={:.2}±{:.2} mean_entry_v={:.3}",
        b.runs.len(),
        b.mean_delay.mean,
        b.mean_delay.std,
        b.t_final.mean,
        b.t_final.std,
        b.mean_entry_velocity.mean
    );
    Ok(())
}

fn cmd_sweep(common: &Common) -> Result<(), Failure> {
    let (file, base) = load(common)?;
    let sweep = file.sweep.clone().ok_or_else(|| anyhow!("configuration has no [sweep] section"))?;
    let modes = common.mode.map_or(sweep.modes.clone(), |m| vec![m]);
    let spec = ExperimentSpec {
        base,
        axis: sweep.axis,
        values: sweep.values.clone(),
        runs: common.runs.unwrap_or(sweep.runs),
        modes,
        out: common.out.clone(),
    };
    let report = run_experiment(&spec).map_err(|e| Failure::from(anyhow::Error::new(e)))?;
    let mut unsafe_runs = 0;
    for p in &report.points {
        unsafe_runs += p.safety_violations;
        println!(
            "{}={} mode={} runs={} mean_delay={:.3} t_final={:.2} mean_entry_v={:.3} violations={}",
            p.axis.as_str(),
            p.value,
            p.mode.as_str(),
            p.runs,
            p.mean_delay.mean,
            p.t_final.mean,
            p.mean_entry_velocity.mean,
            p.safety_violations
        );
    }
    if unsafe_runs > 0 {
        return Err(Failure::Safety(anyhow!("{unsafe_runs} runs aborted on a safety violation (see metrics.csv)")));
    }
    Ok(())
}

fn cmd_replay(path: &Path, common: &Common) -> Result<(), Failure> {
    let (_, mut cfg) = load(common)?;
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let arrivals = parse_scripted(f, &path.display().to_string(), cfg.geometry.lane_count())
        .map_err(|e| Failure::Config(e.into()))?;
    let last = arrivals.iter().map(|a| a.t0).fold(0.0, f64::max);
    cfg.horizon = cfg.horizon.max(last + cfg.dt);
    cfg.arrivals = ArrivalSource::Scripted { arrivals };
    let modes = common.mode.map_or(vec![Mode::Relaxed, Mode::Fifo, Mode::Exact], |m| vec![m]);
    let mut lines = String::from("mode,t_final,mean_delay,mean_entry_velocity,merge_order\n");
    for mode in modes {
        let c = SimConfig { mode, ..cfg.clone() };
        let m = run_one(&c, &common.out.join(mode.as_str()), 1)?;
        report("replay", &m);
        let mut entered: Vec<_> = m.vehicles.iter().filter_map(|r| r.t_m.map(|t| (t, r.uid, r.lane))).collect();
        entered.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<String> = entered.iter().map(|(_, u, l)| format!("{}@{l}", Uid(*u))).collect();
        println!("  merge order: {}", order.join(" "));
        lines.push_str(&format!(
            "{},{},{},{},{}\n",
            mode.as_str(),
            m.t_final,
            m.mean_delay,
            m.mean_entry_velocity,
            order.join(" ")
        ));
    }
    write(&common.out.join("comparison.csv"), lines)?;
    Ok(())
}

#[derive(Debug)]
struct Row {
    t: String,
    id: u32,
    lane: usize,
    p: f64,
    zone: String,
}

fn cmd_validate(log: &Path, common: &Common) -> Result<(), Failure> {
    let (_, cfg) = load(common)?;
    let g = &cfg.geometry;
    let mut reader = mixcross_csv_reader(log)?;
    let headers = reader.headers().map_err(|e| anyhow!("{}: {e}", log.display()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| anyhow!("missing column {name}"));
    let (ct, cid, clane, cp, czone) = (col("t")?, col("vehicle_id")?, col("lane")?, col("p")?, col("zone")?);
    let mut by_t: Vec<(String, Vec<Row>)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| anyhow!("{}, row {}: {e}", log.display(), i + 1))?;
        let parse = |c: usize| -> Result<f64> {
            rec[c].parse::<f64>().map_err(|e| anyhow!("{}, row {}: {e}", log.display(), i + 1))
        };
        let row = Row {
            t: rec[ct].to_string(),
            id: parse(cid)? as u32,
            lane: parse(clane)? as usize,
            p: parse(cp)?,
            zone: rec[czone].to_string(),
        };
        if row.lane == 0 || row.lane > g.lane_count() {
            return Err(Failure::Config(anyhow!("row {}: lane {} outside the geometry", i + 1, row.lane)));
        }
        match by_t.last_mut() {
            Some((t, rows)) if *t == row.t => rows.push(row),
            _ => by_t.push((row.t.clone(), vec![row])),
        }
    }
    let mut problems = Vec::new();
    for (t, rows) in &by_t {
        let merge: Vec<&Row> = rows.iter().filter(|r| r.zone == "merge").collect();
        for (i, a) in merge.iter().enumerate() {
            for b in &merge[i + 1..] {
                if g.conflicts(a.lane, b.lane) {
                    problems.push(format!(
                        "t={t}: #{} (lane {}) and #{} (lane {}) share the merge zone",
                        a.id, a.lane, b.id, b.lane
                    ));
                }
            }
        }
        let mut lanes: HashMap<usize, Vec<&Row>> = HashMap::new();
        for r in rows {
            lanes.entry(r.lane).or_default().push(r);
        }
        for (lane, mut rs) in lanes {
            rs.sort_by_key(|r| r.id);
            for w in rs.windows(2) {
                if w[1].p >= w[0].p {
                    problems.push(format!("t={t}: #{} caught #{} in lane {lane}", w[1].id, w[0].id));
                }
            }
        }
    }
    println!("validated {} time points from {}", by_t.len(), log.display());
    if problems.is_empty() {
        println!("no violations");
        Ok(())
    } else {
        for p in problems.iter().take(20) {
            println!("{p}");
        }
        Err(Failure::Safety(anyhow!("{} violations", problems.len())))
    }
}

fn mixcross_csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))
}
