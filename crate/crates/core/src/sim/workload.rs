//! Arrival processes: Poisson, bursty camera-trap style traces, constant
//! spacing, and replay of recorded traces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::SimError;

/// Upper bound on generated or replayed arrivals in one run.
pub const MAX_ARRIVALS: usize = 5_000_000;

/// Arrival times of a homogeneous Poisson process on `[0, duration_s)`.
pub fn generate_poisson_arrivals(rate_hz: f64, duration_s: f64, seed: u64) -> Vec<f64> {
    poisson_window(rate_hz, 0.0, duration_s, seed)
}

fn poisson_window(rate_hz: f64, start_s: f64, duration_s: f64, seed: u64) -> Vec<f64> {
    if !(rate_hz > 0.0) || !(duration_s > 0.0) {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate_hz).expect("rate is positive");
    let end = start_s + duration_s;
    let mut out = Vec::new();
    let mut t = start_s;
    loop {
        t += gap.sample(&mut rng);
        if t >= end || out.len() >= MAX_ARRIVALS {
            break;
        }
        out.push(t);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub start_s: f64,
    pub duration_s: f64,
    pub rate_hz: f64,
}

/// Background Poisson traffic with superimposed high-rate bursts, the shape
/// of a camera trap that fires in clusters when an animal walks by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstyTrace {
    pub duration_s: f64,
    pub background_rate_hz: f64,
    pub bursts: Vec<Burst>,
    pub seed: u64,
}

impl BurstyTrace {
    pub fn generate(&self) -> Vec<f64> {
        let mut out = poisson_window(self.background_rate_hz, 0.0, self.duration_s, self.seed);
        for (k, b) in self.bursts.iter().enumerate() {
            let end = (b.start_s + b.duration_s).min(self.duration_s);
            let seed = self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(k as u64 + 1));
            out.extend(poisson_window(b.rate_hz, b.start_s.max(0.0), end - b.start_s.max(0.0), seed));
        }
        out.sort_by(f64::total_cmp);
        out.truncate(MAX_ARRIVALS);
        out
    }
}

pub fn constant_arrivals(start_s: f64, interval_s: f64, count: usize) -> Vec<f64> {
    (0..count.min(MAX_ARRIVALS))
        .map(|k| start_s + interval_s * k as f64)
        .collect()
}

/// Parses a trace: one arrival timestamp in decimal seconds per line.
/// Blank lines and `#` comments are skipped; arrivals are returned sorted.
pub fn parse_trace(text: &str) -> Result<Vec<f64>, SimError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let t: f64 = line
            .parse()
            .map_err(|_| SimError::Config(format!("trace line {}: '{}' is not a number", lineno + 1, line)))?;
        if !t.is_finite() || t < 0.0 {
            return Err(SimError::Config(format!(
                "trace line {}: arrival must be a finite non-negative time",
                lineno + 1
            )));
        }
        if out.len() >= MAX_ARRIVALS {
            return Err(SimError::Config(format!("trace exceeds {MAX_ARRIVALS} arrivals")));
        }
        out.push(t);
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

pub fn format_trace(arrivals: &[f64]) -> String {
    arrivals.iter().map(|t| format!("{t:.6}\n")).collect()
}
