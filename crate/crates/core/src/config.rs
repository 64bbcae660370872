//! Scenario documents and device presets.
//!
//! A scenario is one TOML document with a `schema_version` and sections for
//! the model, the device pipeline, the placement, the fitted curves, the
//! ground-truth accuracy, the controller, the workload and the simulation
//! knobs. See `scenarios/` at the repository root for complete examples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::curvefit::{
    accuracy_bench_vectors, fit_accuracy, fit_latency, fit_world_model, AccuracyModel, BenchmarkSample,
    FitCache, FitError, LatencyCurve, DEFAULT_BENCH_GRID,
};
use crate::model::{cost_metrics, pruned_work, ModelError, ModelFixture, ModelGraph};
use crate::partition::{partition, DeviceProfile, PartitionError, PipelinePlan, PlanStage, Slowdown};
use crate::sim::{
    constant_arrivals, generate_poisson_arrivals, parse_trace, Burst, BurstyTrace, Scenario, SimError, StageSpec,
    DEFAULT_BYTES_PER_CHANNEL, DEFAULT_PRUNE_OVERHEAD_S,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Ratio at which device presets are calibrated.
pub const PRESET_CALIBRATION_RATIO: f64 = 0.3;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<ModelError> for Error {
    fn from(e: ModelError) -> Self {
        Error::Config(e.to_string())
    }
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Calibrated device classes. Single-stage speedup at ratio 0.3 is 1.5x on
/// the Pi 4B, 1.17x on the Ryzen 9 5950X and 1.14x on the RTX 4070.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Pi4b,
    Ryzen5950x,
    Rtx4070,
}

impl Preset {
    pub fn speedup_at_calibration(self) -> f64 {
        match self {
            Preset::Pi4b => 1.5,
            Preset::Ryzen5950x => 1.17,
            Preset::Rtx4070 => 1.14,
        }
    }

    /// Relative latency slope `k` with `t(p) = beta * (1 + k p)` passing
    /// through the calibrated speedup.
    pub fn latency_slope(self) -> f64 {
        (1.0 / self.speedup_at_calibration() - 1.0) / PRESET_CALIBRATION_RATIO
    }

    pub fn profile(self, id: impl Into<String>) -> DeviceProfile {
        let (speed, memory, bandwidth, link) = match self {
            // work units per second, parameters, bytes per second, seconds
            Preset::Pi4b => (1.0, 2.0e9, 1.25e8, 5e-4),
            Preset::Ryzen5950x => (12.0, 3.2e10, 1.25e9, 1e-4),
            Preset::Rtx4070 => (40.0, 3.0e9, 1.25e9, 1e-4),
        };
        DeviceProfile {
            id: id.into(),
            speed,
            memory_capacity: memory,
            bandwidth_out: bandwidth,
            link_latency: link,
            slowdowns: Vec::new(),
            latency_slope: Some(self.latency_slope()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub curves: CurvesSection,
    pub ground_truth: Option<GroundTruth>,
    #[serde(default)]
    pub controller: ControllerConfig,
    pub workload: Option<WorkloadConfig>,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSection {
    File { fixture: PathBuf },
    Inline(ModelFixture),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub id: String,
    pub preset: Option<Preset>,
    pub speed: Option<f64>,
    pub memory_capacity: Option<f64>,
    pub bandwidth_out: Option<f64>,
    pub link_latency: Option<f64>,
    pub latency_slope: Option<f64>,
    #[serde(default)]
    pub slowdowns: Vec<Slowdown>,
}

impl DeviceConfig {
    pub fn resolve(&self) -> Result<DeviceProfile, Error> {
        let mut d = match self.preset {
            Some(p) => p.profile(self.id.clone()),
            None => DeviceProfile {
                id: self.id.clone(),
                speed: self
                    .speed
                    .ok_or_else(|| Error::config(format!("device {}: speed or preset required", self.id)))?,
                memory_capacity: f64::INFINITY,
                bandwidth_out: f64::INFINITY,
                link_latency: 0.0,
                slowdowns: Vec::new(),
                latency_slope: None,
            },
        };
        if let Some(v) = self.speed {
            d.speed = v;
        }
        if let Some(v) = self.memory_capacity {
            d.memory_capacity = v;
        }
        if let Some(v) = self.bandwidth_out {
            d.bandwidth_out = v;
        }
        if let Some(v) = self.link_latency {
            d.link_latency = v;
        }
        if self.latency_slope.is_some() {
            d.latency_slope = self.latency_slope;
        }
        d.slowdowns = self.slowdowns.clone();
        d.validate().map_err(Error::Config)?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    /// Stage end indices. Absent means run the partitioner.
    pub cuts: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesSection {
    /// Fitted parameter cache written by `fit`. Absent means benchmark the
    /// ground truth and fit in place.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub gamma: Vec<f64>,
    pub delta: f64,
}

impl GroundTruth {
    pub fn model(&self) -> AccuracyModel {
        AccuracyModel::new(self.gamma.clone(), self.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadConfig {
    Poisson {
        rate_hz: f64,
        duration_s: f64,
        seed: Option<u64>,
    },
    Bursty {
        duration_s: f64,
        background_rate_hz: f64,
        #[serde(default)]
        bursts: Vec<Burst>,
        seed: Option<u64>,
    },
    Constant {
        #[serde(default)]
        start_s: f64,
        interval_s: f64,
        count: usize,
    },
    Trace {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub prune_overhead_s: f64,
    pub bytes_per_channel: f64,
    /// Ratios in effect at the start. With the controller disabled they
    /// stay fixed for the run.
    pub pinned_ratios: Option<Vec<f64>>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            prune_overhead_s: DEFAULT_PRUNE_OVERHEAD_S,
            bytes_per_channel: DEFAULT_BYTES_PER_CHANNEL,
            pinned_ratios: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub grid: Vec<f64>,
    /// Measured samples. When empty, the ground truth is benchmarked.
    pub samples: Vec<BenchmarkSample>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            grid: DEFAULT_BENCH_GRID.to_vec(),
            samples: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub rates: Vec<f64>,
    pub ratios: Vec<Vec<f64>>,
    pub duration_s: f64,
}

/// Hex SHA-256 of the raw config text, stamped into every output.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        if cfg.devices.is_empty() {
            return Err(Error::config("at least one device is required"));
        }
        Ok(cfg)
    }
}

/// A config read from disk, with the directory relative paths resolve
/// against and the hash of its bytes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ScenarioConfig,
    pub base_dir: PathBuf,
    pub hash: String,
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<Self, Error> {
        let text = read(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, base_dir)
    }

    pub fn from_text(text: &str, base_dir: PathBuf) -> Result<Self, Error> {
        Ok(LoadedConfig {
            config: ScenarioConfig::parse(text)?,
            base_dir,
            hash: config_hash(text),
        })
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn model(&self) -> Result<ModelGraph, Error> {
        let fixture = match &self.config.model {
            ModelSection::Inline(f) => f.clone(),
            ModelSection::File { fixture } => ModelFixture::parse(&read(&self.path(fixture))?)?,
        };
        Ok(fixture.build()?)
    }

    pub fn devices(&self) -> Result<Vec<DeviceProfile>, Error> {
        self.config.devices.iter().map(DeviceConfig::resolve).collect()
    }

    pub fn plan(&self, model: &ModelGraph, devices: &[DeviceProfile]) -> Result<PipelinePlan, Error> {
        match &self.config.plan.cuts {
            None => Ok(partition(model, devices)?),
            Some(cuts) => explicit_plan(model, devices, cuts),
        }
    }

    pub fn ground_truth(&self, slices: usize) -> Result<AccuracyModel, Error> {
        let gt = self
            .config
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::config("ground_truth section is required"))?
            .model();
        if gt.slices() != slices {
            return Err(Error::config(format!(
                "ground_truth has {} gammas for {slices} stages",
                gt.slices()
            )));
        }
        if !gt.delta.is_finite() || gt.gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::config("ground_truth values must be finite"));
        }
        Ok(gt)
    }

    /// Effective seed for stochastic workload generation.
    pub fn workload_seed(&self, own: Option<u64>, seed_override: Option<u64>) -> u64 {
        seed_override.or(own).unwrap_or(self.config.seed)
    }

    pub fn arrivals(&self, seed_override: Option<u64>) -> Result<Vec<f64>, Error> {
        let w = self
            .config
            .workload
            .as_ref()
            .ok_or_else(|| Error::config("workload section is required"))?;
        check_workload(w)?;
        Ok(match w {
            WorkloadConfig::Poisson { rate_hz, duration_s, seed } => {
                generate_poisson_arrivals(*rate_hz, *duration_s, self.workload_seed(*seed, seed_override))
            }
            WorkloadConfig::Bursty {
                duration_s,
                background_rate_hz,
                bursts,
                seed,
            } => BurstyTrace {
                duration_s: *duration_s,
                background_rate_hz: *background_rate_hz,
                bursts: bursts.clone(),
                seed: self.workload_seed(*seed, seed_override),
            }
            .generate(),
            WorkloadConfig::Constant { start_s, interval_s, count } => constant_arrivals(*start_s, *interval_s, *count),
            WorkloadConfig::Trace { path } => parse_trace(&read(&self.path(path))?)?,
        })
    }

    /// Benchmark samples: the configured ones, or a sweep of the ground
    /// truth over the benchmark grid.
    pub fn benchmark_samples(&self, world: &World) -> Result<Vec<BenchmarkSample>, Error> {
        let bench = &self.config.benchmark;
        if !bench.samples.is_empty() {
            return Ok(bench.samples.clone());
        }
        check_grid(&bench.grid)?;
        let n = world.plan.stages.len();
        let mut samples = Vec::new();
        for &g in &bench.grid {
            let ratios = vec![g; n];
            let latency = (0..n).map(|i| world.true_stage_latency(i, g)).collect::<Result<Vec<_>, _>>()?;
            samples.push(BenchmarkSample { ratios, latency: Some(latency), accuracy: None });
        }
        for p in accuracy_bench_vectors(n, &bench.grid) {
            let a = world.ground_truth.predict(&p)?;
            samples.push(BenchmarkSample { ratios: p, latency: None, accuracy: Some(a) });
        }
        Ok(samples)
    }

    /// Fitted curves: from the cache file if configured, otherwise fitted
    /// from benchmark samples.
    pub fn fitted(&self, world: &World) -> Result<(Vec<LatencyCurve>, AccuracyModel), Error> {
        let n = world.plan.stages.len();
        if let Some(path) = &self.config.curves.cache {
            let cache = FitCache::parse(&read(&self.path(path))?)?;
            if cache.slices.len() != n {
                return Err(Error::config(format!(
                    "cache has {} slices, plan has {n} stages",
                    cache.slices.len()
                )));
            }
            return Ok((cache.curves(), cache.accuracy()));
        }
        let samples = self.benchmark_samples(world)?;
        let (curves, acc) = fit_world_model(&samples)?;
        if curves.len() != n {
            return Err(Error::config(format!("benchmark covers {} slices, plan has {n}", curves.len())));
        }
        Ok((curves, acc))
    }

    /// Builds the world and a runnable scenario.
    pub fn scenario(&self, seed_override: Option<u64>) -> Result<(World, Scenario), Error> {
        let world = World::build(self)?;
        let (curves, accuracy_model) = self.fitted(&world)?;
        let arrivals = self.arrivals(seed_override)?;
        let sim = &self.config.simulation;
        let stages = world
            .plan
            .stages
            .iter()
            .zip(&world.devices)
            .zip(&curves)
            .map(|((stage, device), curve)| StageSpec {
                device: device.clone(),
                curve: *curve,
                boundary_channels: world.model.layers[stage.layers.end - 1].out_channels,
                bytes_per_channel: sim.bytes_per_channel,
            })
            .collect();
        let scenario = Scenario {
            stages,
            accuracy_model,
            ground_truth_accuracy: world.ground_truth.clone(),
            controller: self.config.controller.clone(),
            arrivals,
            prune_overhead_s: sim.prune_overhead_s,
            initial_ratios: sim.pinned_ratios.clone(),
        };
        scenario.validate()?;
        Ok((world, scenario))
    }
}

/// Ground-truth deployment: model, devices, placement and true accuracy.
#[derive(Debug, Clone)]
pub struct World {
    pub model: ModelGraph,
    pub devices: Vec<DeviceProfile>,
    pub plan: PipelinePlan,
    pub ground_truth: AccuracyModel,
}

impl World {
    pub fn build(cfg: &LoadedConfig) -> Result<Self, Error> {
        let model = cfg.model()?;
        let devices = cfg.devices()?;
        let plan = cfg.plan(&model, &devices)?;
        let ground_truth = cfg.ground_truth(plan.stages.len())?;
        Ok(World { model, devices, plan, ground_truth })
    }

    /// True service time of stage `i` at `ratio`, nominal speed.
    pub fn true_stage_latency(&self, i: usize, ratio: f64) -> Result<f64, Error> {
        let stage = &self.plan.stages[i];
        let device = &self.devices[i];
        match device.latency_slope {
            Some(k) => Ok((stage.latency * (1.0 + k * ratio)).max(0.0)),
            None => Ok(pruned_work(&self.model, stage.layers.clone(), ratio)? / device.speed),
        }
    }

    /// Exact latency curve through the true latencies at 0 and 1, used when
    /// the true curve is linear.
    pub fn true_curve(&self, i: usize, grid: &[f64]) -> Result<LatencyCurve, Error> {
        let pts = grid
            .iter()
            .map(|&g| Ok((g, self.true_stage_latency(i, g)?)))
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(fit_latency(&pts)?)
    }

    pub fn true_accuracy_fit(&self, grid: &[f64]) -> Result<AccuracyModel, Error> {
        let n = self.plan.stages.len();
        let samples = accuracy_bench_vectors(n, grid)
            .into_iter()
            .map(|p| {
                let a = self.ground_truth.predict(&p)?;
                Ok((p, a))
            })
            .collect::<Result<Vec<_>, FitError>>()?;
        Ok(fit_accuracy(&samples)?)
    }
}

fn explicit_plan(model: &ModelGraph, devices: &[DeviceProfile], cuts: &[usize]) -> Result<PipelinePlan, Error> {
    if cuts.len() != devices.len() {
        return Err(Error::config(format!("{} cuts for {} devices", cuts.len(), devices.len())));
    }
    if cuts.last() != Some(&model.len()) || cuts.first() == Some(&0) || cuts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "cuts must be strictly increasing stage ends finishing at the layer count",
        ));
    }
    let mut start = 0;
    let mut stages = Vec::with_capacity(cuts.len());
    for (&end, d) in cuts.iter().zip(devices) {
        let cost = cost_metrics(model, start..end)?;
        if cost.params as f64 > d.memory_capacity {
            return Err(PartitionError::Infeasible(format!("stage on {} exceeds its memory", d.id)).into());
        }
        stages.push(PlanStage {
            device: d.id.clone(),
            layers: start..end,
            latency: cost.work / d.speed,
            params: cost.params,
        });
        start = end;
    }
    let makespan = stages.iter().map(|s| s.latency).fold(0.0, f64::max);
    Ok(PipelinePlan { stages, makespan })
}

fn check_grid(grid: &[f64]) -> Result<(), Error> {
    if grid.len() < 2 || grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(Error::config("benchmark grid needs at least two ratios in [0, 1]"));
    }
    Ok(())
}

fn check_workload(w: &WorkloadConfig) -> Result<(), Error> {
    let ok = |x: f64| x.is_finite() && x >= 0.0;
    let valid = match w {
        WorkloadConfig::Poisson { rate_hz, duration_s, .. } => *rate_hz > 0.0 && rate_hz.is_finite() && ok(*duration_s),
        WorkloadConfig::Bursty {
            duration_s,
            background_rate_hz,
            bursts,
            ..
        } => {
            ok(*duration_s)
                && ok(*background_rate_hz)
                && bursts
                    .iter()
                    .all(|b| ok(b.start_s) && ok(b.duration_s) && ok(b.rate_hz))
        }
        WorkloadConfig::Constant { start_s, interval_s, .. } => ok(*start_s) && ok(*interval_s),
        WorkloadConfig::Trace { .. } => true,
    };
    if !valid {
        return Err(Error::config("workload rates, times and durations must be finite and non-negative"));
    }
    // keep generated arrival counts bounded
    let expected = match w {
        WorkloadConfig::Poisson { rate_hz, duration_s, .. } => rate_hz * duration_s,
        WorkloadConfig::Bursty {
            duration_s,
            background_rate_hz,
            bursts,
            ..
        } => background_rate_hz * duration_s + bursts.iter().map(|b| b.rate_hz * b.duration_s).sum::<f64>(),
        _ => 0.0,
    };
    if expected > crate::sim::workload::MAX_ARRIVALS as f64 {
        return Err(Error::config("workload would generate too many arrivals"));
    }
    Ok(())
}

pub fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
