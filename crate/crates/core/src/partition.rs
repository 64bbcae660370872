//! Contiguous placement of a layer chain onto an ordered device pipeline.
//!
//! The placement minimizes the bottleneck stage latency subject to each
//! stage fitting in its device's memory. Every device gets a non-empty
//! stage and devices keep the order they are given in.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{cost_metrics, ModelError, ModelGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no feasible placement: {0}")]
    Infeasible(String),
    #[error("instance too large for exhaustive search ({layers} layers, {devices} devices)")]
    SizeGuard { layers: usize, devices: usize },
    #[error("at least one device is required")]
    NoDevices,
}

/// A transient multiplicative speed reduction on one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slowdown {
    pub start_s: f64,
    pub duration_s: f64,
    /// Fraction of nominal speed left while active, in (0, 1].
    pub speed_multiplier: f64,
}

impl Slowdown {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn active_at(&self, t: f64) -> bool {
        t >= self.start_s && t < self.end_s()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: String,
    /// Work units per second.
    pub speed: f64,
    /// In parameter-count units.
    pub memory_capacity: f64,
    /// Payload bytes per second toward the next device.
    pub bandwidth_out: f64,
    pub link_latency: f64,
    #[serde(default)]
    pub slowdowns: Vec<Slowdown>,
    /// Relative change of stage latency per unit pruning ratio. When set,
    /// the device's true latency is `base * (1 + slope * ratio)`; otherwise
    /// it follows the pruned work of its slice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_slope: Option<f64>,
}

impl DeviceProfile {
    pub fn new(id: impl Into<String>, speed: f64) -> Self {
        DeviceProfile {
            id: id.into(),
            speed,
            memory_capacity: f64::INFINITY,
            bandwidth_out: f64::INFINITY,
            link_latency: 0.0,
            slowdowns: Vec::new(),
            latency_slope: None,
        }
    }

    /// Product of all slowdown multipliers active at `t`.
    pub fn speed_multiplier_at(&self, t: f64) -> f64 {
        self.slowdowns
            .iter()
            .filter(|s| s.active_at(t))
            .map(|s| s.speed_multiplier)
            .product()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(format!("device {}: speed must be positive", self.id));
        }
        if !(self.memory_capacity > 0.0) {
            return Err(format!("device {}: memory_capacity must be positive", self.id));
        }
        if !(self.bandwidth_out > 0.0) {
            return Err(format!("device {}: bandwidth_out must be positive", self.id));
        }
        if !(self.link_latency >= 0.0 && self.link_latency.is_finite()) {
            return Err(format!("device {}: link_latency must be non-negative", self.id));
        }
        for s in &self.slowdowns {
            if !(s.speed_multiplier > 0.0 && s.speed_multiplier <= 1.0) {
                return Err(format!(
                    "device {}: slowdown multiplier {} is outside (0, 1]",
                    self.id, s.speed_multiplier
                ));
            }
            if !(s.start_s.is_finite() && s.duration_s >= 0.0 && s.duration_s.is_finite()) {
                return Err(format!("device {}: malformed slowdown window", self.id));
            }
        }
        if let Some(k) = self.latency_slope {
            if !k.is_finite() {
                return Err(format!("device {}: latency_slope must be finite", self.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStage {
    pub device: String,
    pub layers: Range<usize>,
    /// Predicted service time at ratio 0 with no slowdown.
    pub latency: f64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub stages: Vec<PlanStage>,
    pub makespan: f64,
}

impl PipelinePlan {
    pub fn boundaries(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.layers.end).collect()
    }
}

/// Unpruned service time of `range` on `device`: work over speed.
pub fn profile_stage(
    model: &ModelGraph,
    range: Range<usize>,
    device: &DeviceProfile,
) -> Result<f64, ModelError> {
    Ok(cost_metrics(model, range)?.work / device.speed)
}

/// Stage latency and memory for every (start, end) pair, accumulated in
/// the same order as [`cost_metrics`] so both searches see identical bits.
struct CostTable {
    n: usize,
    work: Vec<f64>,
    params: Vec<u64>,
}

impl CostTable {
    fn new(model: &ModelGraph) -> Self {
        let n = model.len();
        let mut work = vec![0.0; (n + 1) * (n + 1)];
        let mut params = vec![0u64; (n + 1) * (n + 1)];
        for i in 0..n {
            let (mut w, mut p) = (0.0, 0u64);
            for j in i..n {
                w += model.layers[j].work_units();
                p += model.layers[j].param_count();
                work[i * (n + 1) + j + 1] = w;
                params[i * (n + 1) + j + 1] = p;
            }
        }
        CostTable { n, work, params }
    }

    /// Latency of layers `i..j` on `device`, or infinity if they do not fit.
    fn stage_cost(&self, i: usize, j: usize, device: &DeviceProfile) -> f64 {
        let idx = i * (self.n + 1) + j;
        if self.params[idx] as f64 > device.memory_capacity {
            f64::INFINITY
        } else {
            self.work[idx] / device.speed
        }
    }

    fn plan(&self, cuts: &[usize], devices: &[DeviceProfile]) -> PipelinePlan {
        let mut stages = Vec::with_capacity(devices.len());
        let mut start = 0;
        for (&end, device) in cuts.iter().zip(devices) {
            stages.push(PlanStage {
                device: device.id.clone(),
                layers: start..end,
                latency: self.stage_cost(start, end, device),
                params: self.params[start * (self.n + 1) + end],
            });
            start = end;
        }
        let makespan = stages.iter().map(|s| s.latency).fold(0.0, f64::max);
        PipelinePlan { stages, makespan }
    }
}

fn check_inputs(model: &ModelGraph, devices: &[DeviceProfile]) -> Result<(), PartitionError> {
    if devices.is_empty() {
        return Err(PartitionError::NoDevices);
    }
    if model.len() < devices.len() {
        return Err(PartitionError::Infeasible(format!(
            "{} layers cannot give each of {} devices a non-empty stage",
            model.len(),
            devices.len()
        )));
    }
    Ok(())
}

/// Min-max contiguous placement by dynamic programming.
///
/// `best[k][i]` is the smallest achievable bottleneck for layers `i..n` on
/// devices `k..`. Among optimal placements the one with the lexicographically
/// smallest stage boundaries is returned.
pub fn partition(model: &ModelGraph, devices: &[DeviceProfile]) -> Result<PipelinePlan, PartitionError> {
    check_inputs(model, devices)?;
    let n = model.len();
    let d = devices.len();
    let table = CostTable::new(model);

    let mut best = vec![vec![f64::INFINITY; n + 1]; d + 1];
    best[d][n] = 0.0;
    for k in (0..d).rev() {
        let remaining_after = d - k - 1;
        for i in 0..n {
            let mut b = f64::INFINITY;
            for j in (i + 1)..=(n - remaining_after) {
                let c = table.stage_cost(i, j, &devices[k]).max(best[k + 1][j]);
                if c < b {
                    b = c;
                }
            }
            best[k][i] = b;
        }
    }
    let makespan = best[0][0];
    if !makespan.is_finite() {
        return Err(PartitionError::Infeasible(
            "no contiguous split fits every stage in device memory".into(),
        ));
    }

    let mut cuts = Vec::with_capacity(d);
    let mut i = 0;
    for k in 0..d {
        let remaining_after = d - k - 1;
        let j = ((i + 1)..=(n - remaining_after))
            .find(|&j| table.stage_cost(i, j, &devices[k]) <= makespan && best[k + 1][j] <= makespan)
            .expect("an optimal continuation exists");
        cuts.push(j);
        i = j;
    }
    Ok(table.plan(&cuts, devices))
}

pub const BRUTE_FORCE_MAX_LAYERS: usize = 16;
pub const BRUTE_FORCE_MAX_DEVICES: usize = 4;

/// Exhaustive search over every contiguous split. Same objective and
/// tie-break as [`partition`]; used as its test oracle.
pub fn brute_force_partition(
    model: &ModelGraph,
    devices: &[DeviceProfile],
) -> Result<PipelinePlan, PartitionError> {
    if model.len() > BRUTE_FORCE_MAX_LAYERS || devices.len() > BRUTE_FORCE_MAX_DEVICES {
        return Err(PartitionError::SizeGuard {
            layers: model.len(),
            devices: devices.len(),
        });
    }
    check_inputs(model, devices)?;
    let table = CostTable::new(model);
    let mut cuts = Vec::with_capacity(devices.len());
    let mut best: Option<(f64, Vec<usize>)> = None;
    enumerate_cuts(&table, devices, 0, &mut cuts, &mut best);
    match best {
        Some((m, cuts)) if m.is_finite() => Ok(table.plan(&cuts, devices)),
        _ => Err(PartitionError::Infeasible(
            "no contiguous split fits every stage in device memory".into(),
        )),
    }
}

// Visits splits in lexicographic boundary order; only a strictly better
// bottleneck replaces the incumbent.
fn enumerate_cuts(
    table: &CostTable,
    devices: &[DeviceProfile],
    start: usize,
    cuts: &mut Vec<usize>,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    let k = cuts.len();
    let n = table.n;
    if k == devices.len() {
        let mut prev = 0;
        let mut m: f64 = 0.0;
        for (&end, dev) in cuts.iter().zip(devices) {
            m = m.max(table.stage_cost(prev, end, dev));
            prev = end;
        }
        if best.as_ref().is_none_or(|(b, _)| m < *b) {
            *best = Some((m, cuts.clone()));
        }
        return;
    }
    let remaining_after = devices.len() - k - 1;
    let ends: Vec<usize> = if remaining_after == 0 {
        vec![n]
    } else {
        ((start + 1)..=(n - remaining_after)).collect()
    };
    for end in ends {
        cuts.push(end);
        enumerate_cuts(table, devices, end, cuts, best);
        cuts.pop();
    }
}
