use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: usize,
    pub arrival_s: f64,
    pub stage_start: Vec<f64>,
    pub stage_end: Vec<f64>,
    pub completion_s: f64,
    pub latency_s: f64,
    pub slo_met: bool,
    /// Ratio each stage ran this request at.
    pub ratios_in_effect: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub decided_s: f64,
    pub applied_s: f64,
    pub unprune: bool,
    pub old: Vec<f64>,
    pub new: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub time_s: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub requests: usize,
    pub mean_latency: f64,
    pub p50_latency: f64,
    pub p95_latency: f64,
    pub p99_latency: f64,
    pub max_latency: f64,
    pub slo_attainment: f64,
    pub throughput: f64,
    pub prune_events: Vec<PruneEvent>,
    pub accuracy_timeline: Vec<AccuracyPoint>,
}

impl RunMetrics {
    pub fn min_accuracy(&self) -> f64 {
        self.accuracy_timeline
            .iter()
            .map(|p| p.accuracy)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn one_line(&self) -> String {
        format!(
            "requests={} p99={:.4}s mean={:.4}s attainment={:.4} prunes={}",
            self.requests,
            self.p99_latency,
            self.mean_latency,
            self.slo_attainment,
            self.prune_events.len()
        )
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct * n as f64) / 100.0).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn summarize(records: &[RequestRecord], slo: f64) -> Result<RunMetrics, SimError> {
    if records.is_empty() {
        return Err(SimError::EmptyRun);
    }
    let mut lat: Vec<f64> = records.iter().map(|r| r.latency_s).collect();
    lat.sort_by(f64::total_cmp);
    let n = lat.len();
    let met = records.iter().filter(|r| r.latency_s <= slo).count();
    let first_arrival = records.iter().map(|r| r.arrival_s).fold(f64::INFINITY, f64::min);
    let last_completion = records.iter().map(|r| r.completion_s).fold(f64::NEG_INFINITY, f64::max);
    let span = last_completion - first_arrival;
    Ok(RunMetrics {
        requests: n,
        mean_latency: lat.iter().sum::<f64>() / n as f64,
        p50_latency: nearest_rank(&lat, 50.0),
        p95_latency: nearest_rank(&lat, 95.0),
        p99_latency: nearest_rank(&lat, 99.0),
        max_latency: lat[n - 1],
        slo_attainment: met as f64 / n as f64,
        throughput: if span > 0.0 { n as f64 / span } else { 0.0 },
        prune_events: Vec::new(),
        accuracy_timeline: Vec::new(),
    })
}
