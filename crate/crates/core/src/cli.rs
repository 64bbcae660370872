//! Command-line entry point: `partition`, `fit`, `simulate` and `sweep`.
//!
//! Exit statuses:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 1 | I/O failure, or an output exists and `--force` was not given |
//! | 2 | bad command line |
//! | 3 | config error |
//! | 4 | infeasible placement |
//! | 5 | degenerate fit |
//! | 6 | empty run |

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Error, LoadedConfig, World};
use crate::curvefit::{fit_world_model, FitCache, FitError};
use crate::partition::{PartitionError, PipelinePlan};
use crate::sim::{self, generate_poisson_arrivals, records_csv, PruneEvent, RunMetrics, SimError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;
pub const EXIT_DEGENERATE_FIT: i32 = 5;
pub const EXIT_EMPTY_RUN: i32 = 6;

#[derive(Debug, Parser)]
#[command(name = "edgeprune", version, about = "Dynamic pruning control plane for pipelined edge inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Place the model's layers onto the device pipeline.
    Partition(CommonArgs),
    /// Benchmark or read samples and write the fitted parameter cache.
    Fit(CommonArgs),
    /// Run the closed-loop pipeline simulation.
    Simulate(CommonArgs),
    /// Simulate a grid of pinned ratios and arrival rates.
    Sweep(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides every workload seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Run(#[from] Error),
    #[error("{0} already exists (pass --force to overwrite)")]
    OutputExists(PathBuf),
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        CliError::Run(Error::Fit(e))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Run(Error::Sim(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::OutputExists(_) => EXIT_IO,
            CliError::Run(e) => match e {
                Error::Io { .. } => EXIT_IO,
                Error::Config(_) => EXIT_CONFIG,
                Error::Partition(PartitionError::Infeasible(_)) => EXIT_INFEASIBLE,
                Error::Partition(_) => EXIT_CONFIG,
                Error::Fit(FitError::DegenerateFit(_)) => EXIT_DEGENERATE_FIT,
                Error::Fit(_) => EXIT_CONFIG,
                Error::Sim(SimError::EmptyRun) => EXIT_EMPTY_RUN,
                Error::Sim(_) => EXIT_CONFIG,
            },
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Partition(a) => cmd_partition(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

struct Outputs<'a> {
    args: &'a CommonArgs,
}

impl Outputs<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.args.out.join(name)
    }

    fn check(&self, names: &[&str]) -> Result<(), CliError> {
        if !self.args.force {
            for n in names {
                let p = self.path(n);
                if p.exists() {
                    return Err(CliError::OutputExists(p));
                }
            }
        }
        Ok(())
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        std::fs::create_dir_all(&self.args.out).map_err(|source| Error::Io {
            path: self.args.out.clone(),
            source,
        })?;
        std::fs::write(&path, contents).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

fn say(args: &CommonArgs, msg: impl AsRef<str>) {
    if !args.quiet {
        println!("{}", msg.as_ref());
    }
}

fn effective_seed(cfg: &LoadedConfig, args: &CommonArgs) -> u64 {
    args.seed.unwrap_or(cfg.config.seed)
}

fn stamp(cfg: &LoadedConfig, seed: u64, prefix: &str) -> String {
    format!("{prefix}config_hash = \"{}\"\n{prefix}seed = {seed}\n", cfg.hash)
}

pub const PLAN_FILE: &str = "plan.toml";
pub const CACHE_FILE: &str = "fit_cache.toml";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Serialize)]
struct PlanReport<'a> {
    config_hash: &'a str,
    seed: u64,
    makespan: f64,
    stages: Vec<StageRow<'a>>,
}

#[derive(Serialize)]
struct StageRow<'a> {
    device: &'a str,
    first_layer: usize,
    end_layer: usize,
    predicted_latency: f64,
    params: u64,
}

pub fn plan_table(plan: &PipelinePlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>12} {:>14} {:>14}", "device", "layers", "latency_s", "params");
    for st in &plan.stages {
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>14.6} {:>14}",
            st.device,
            format!("{}..{}", st.layers.start, st.layers.end),
            st.latency,
            st.params
        );
    }
    let _ = writeln!(s, "makespan {:.6} s", plan.makespan);
    s
}

pub fn cmd_partition(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = LoadedConfig::from_path(&args.config)?;
    let out = Outputs { args };
    out.check(&[PLAN_FILE])?;
    let model = cfg.model()?;
    let devices = cfg.devices()?;
    let plan = cfg.plan(&model, &devices)?;
    let seed = effective_seed(&cfg, args);
    let report = PlanReport {
        config_hash: &cfg.hash,
        seed,
        makespan: plan.makespan,
        stages: plan
            .stages
            .iter()
            .map(|s| StageRow {
                device: &s.device,
                first_layer: s.layers.start,
                end_layer: s.layers.end,
                predicted_latency: s.latency,
                params: s.params,
            })
            .collect(),
    };
    let text = toml::to_string(&report).expect("plan report serializes");
    let path = out.write(PLAN_FILE, &text)?;
    say(args, plan_table(&plan));
    say(args, format!("wrote {}", path.display()));
    Ok(())
}

pub fn cmd_fit(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = LoadedConfig::from_path(&args.config)?;
    let out = Outputs { args };
    out.check(&[CACHE_FILE])?;
    let world = World::build(&cfg)?;
    let samples = cfg.benchmark_samples(&world)?;
    let (curves, acc) = fit_world_model(&samples)?;
    if curves.len() != world.plan.stages.len() {
        return Err(Error::config(format!(
            "benchmark covers {} slices, plan has {}",
            curves.len(),
            world.plan.stages.len()
        ))
        .into());
    }
    let cache = FitCache::new(&curves, &acc, cfg.hash.clone(), effective_seed(&cfg, args));
    let path = out.write(CACHE_FILE, &cache.to_toml())?;
    for (i, s) in cache.slices.iter().enumerate() {
        say(args, format!("slice {i}: alpha={:.6} beta={:.6} gamma={:.6}", s.alpha, s.beta, s.gamma));
    }
    say(args, format!("delta={:.6}", cache.delta));
    say(args, format!("wrote {}", path.display()));
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    seed: u64,
    requests: usize,
    mean_latency: f64,
    p50_latency: f64,
    p95_latency: f64,
    p99_latency: f64,
    max_latency: f64,
    slo_attainment: f64,
    throughput: f64,
    prune_count: usize,
    min_accuracy: f64,
    prune_events: &'a [PruneEvent],
}

pub fn summary_toml(metrics: &RunMetrics, hash: &str, seed: u64) -> String {
    let s = Summary {
        config_hash: hash,
        seed,
        requests: metrics.requests,
        mean_latency: metrics.mean_latency,
        p50_latency: metrics.p50_latency,
        p95_latency: metrics.p95_latency,
        p99_latency: metrics.p99_latency,
        max_latency: metrics.max_latency,
        slo_attainment: metrics.slo_attainment,
        throughput: metrics.throughput,
        prune_count: metrics.prune_events.len(),
        min_accuracy: metrics.min_accuracy(),
        prune_events: &metrics.prune_events,
    };
    toml::to_string(&s).expect("summary serializes")
}

pub fn cmd_simulate(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = LoadedConfig::from_path(&args.config)?;
    let out = Outputs { args };
    out.check(&[SUMMARY_FILE, REQUESTS_FILE, DECISIONS_FILE])?;
    let seed = effective_seed(&cfg, args);
    let (_, scenario) = cfg.scenario(args.seed)?;
    let result = sim::run(&scenario)?;
    out.write(SUMMARY_FILE, &summary_toml(&result.metrics, &cfg.hash, seed))?;
    out.write(REQUESTS_FILE, &records_csv(&result.records, &stamp(&cfg, seed, "# ")))?;
    let mut log = serde_json::json!({ "config_hash": cfg.hash, "seed": seed }).to_string();
    log.push('\n');
    for d in &result.decisions {
        log.push_str(&serde_json::to_string(d).expect("decision serializes"));
        log.push('\n');
    }
    out.write(DECISIONS_FILE, &log)?;
    say(args, result.metrics.one_line());
    Ok(())
}

/// One cell of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub rate_hz: f64,
    pub ratios: String,
    pub mean_latency: Option<f64>,
    pub p95_latency: Option<f64>,
    pub p99_latency: Option<f64>,
    pub slo_attainment: Option<f64>,
    pub status: String,
}

/// Runs every (rate, pinned ratio vector) cell with the controller off.
pub fn sweep(cfg: &LoadedConfig, seed_override: Option<u64>) -> Result<Vec<SweepRow>, Error> {
    let section = cfg
        .config
        .sweep
        .clone()
        .ok_or_else(|| Error::config("sweep section is required"))?;
    if !(section.duration_s.is_finite() && section.duration_s >= 0.0) {
        return Err(Error::config("sweep duration_s must be finite and non-negative"));
    }
    let mut base = cfg.clone();
    base.config.workload = Some(crate::config::WorkloadConfig::Constant {
        start_s: 0.0,
        interval_s: 1.0,
        count: 1,
    });
    base.config.controller.enabled = false;
    let (_, template) = base.scenario(None)?;
    let seed = seed_override.unwrap_or(cfg.config.seed);

    let cells: Vec<(f64, Vec<f64>)> = section
        .rates
        .iter()
        .flat_map(|&r| section.ratios.iter().map(move |p| (r, p.clone())))
        .collect();
    Ok(cells
        .par_iter()
        .map(|(rate, ratios)| {
            let label = ratios.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
            let mut sc = template.clone();
            sc.initial_ratios = Some(ratios.clone());
            let outcome = if !(*rate > 0.0 && rate.is_finite()) {
                Err(SimError::Config(format!("rate {rate} must be positive")))
            } else {
                sc.arrivals = generate_poisson_arrivals(*rate, section.duration_s, seed);
                sim::run(&sc)
            };
            match outcome {
                Ok(o) => SweepRow {
                    rate_hz: *rate,
                    ratios: label,
                    mean_latency: Some(o.metrics.mean_latency),
                    p95_latency: Some(o.metrics.p95_latency),
                    p99_latency: Some(o.metrics.p99_latency),
                    slo_attainment: Some(o.metrics.slo_attainment),
                    status: "ok".into(),
                },
                Err(e) => SweepRow {
                    rate_hz: *rate,
                    ratios: label,
                    mean_latency: None,
                    p95_latency: None,
                    p99_latency: None,
                    slo_attainment: None,
                    status: format!("failed: {e}"),
                },
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow], header: &str) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("flush")).expect("utf8");
    format!("{header}{body}")
}

pub fn cmd_sweep(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = LoadedConfig::from_path(&args.config)?;
    let out = Outputs { args };
    out.check(&[SWEEP_FILE])?;
    let rows = sweep(&cfg, args.seed)?;
    let seed = effective_seed(&cfg, args);
    let path = out.write(SWEEP_FILE, &sweep_csv(&rows, &stamp(&cfg, seed, "# ")))?;
    if !args.quiet {
        for r in &rows {
            match (r.mean_latency, r.p99_latency, r.slo_attainment) {
                (Some(m), Some(p), Some(a)) => println!(
                    "rate={:<8} ratios={:<16} mean={m:.4} p99={p:.4} attainment={a:.4}",
                    r.rate_hz, r.ratios
                ),
                _ => println!("rate={:<8} ratios={:<16} {}", r.rate_hz, r.ratios, r.status),
            }
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Convenience for tests and scripts: path of an output inside `out`.
pub fn output_path(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}
