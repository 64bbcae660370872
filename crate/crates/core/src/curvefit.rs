//! The controller's world model: a linear latency curve per slice and one
//! logistic accuracy surface over the vector of slice ratios.
//!
//! ```text
//! t_i(p)  = alpha_i * p + beta_i                     (clamped at 0)
//! a(p)    = 1 / (1 + exp(-(sum_i gamma_i * p_i - delta)))
//! ```
//!
//! Accuracy is fitted by ordinary least squares on the logit of the
//! measurements, which is closed form and exact on noise-free data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Measured accuracies are clamped into `[ACC_CLAMP, 1 - ACC_CLAMP]` before
/// the logit transform.
pub const ACC_CLAMP: f64 = 1e-6;

/// Default ratios at which each slice is benchmarked.
pub const DEFAULT_BENCH_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("expected {expected} ratios, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyCurve {
    pub alpha: f64,
    pub beta: f64,
}

impl LatencyCurve {
    pub fn new(alpha: f64, beta: f64) -> Self {
        LatencyCurve { alpha, beta }
    }

    /// Predicted stage latency in seconds, never negative.
    pub fn predict(&self, ratio: f64) -> f64 {
        (self.alpha * ratio + self.beta).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyModel {
    pub gamma: Vec<f64>,
    pub delta: f64,
}

pub fn logistic(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(1e-15, 1.0 - 1e-15)
}

pub fn logit(a: f64) -> f64 {
    (a / (1.0 - a)).ln()
}

impl AccuracyModel {
    pub fn new(gamma: Vec<f64>, delta: f64) -> Self {
        AccuracyModel { gamma, delta }
    }

    pub fn slices(&self) -> usize {
        self.gamma.len()
    }

    /// `sum_i gamma_i * p_i`, the quantity the accuracy constraint acts on.
    pub fn weighted_sum(&self, ratios: &[f64]) -> Result<f64, FitError> {
        if ratios.len() != self.gamma.len() {
            return Err(FitError::DimensionMismatch {
                expected: self.gamma.len(),
                got: ratios.len(),
            });
        }
        Ok(self.gamma.iter().zip(ratios).map(|(g, p)| g * p).sum())
    }

    /// Predicted accuracy, strictly inside (0, 1).
    pub fn predict(&self, ratios: &[f64]) -> Result<f64, FitError> {
        Ok(logistic(self.weighted_sum(ratios)? - self.delta))
    }
}

pub fn predict_latency(curve: &LatencyCurve, ratio: f64) -> f64 {
    curve.predict(ratio)
}

pub fn predict_accuracy(model: &AccuracyModel, ratios: &[f64]) -> Result<f64, FitError> {
    model.predict(ratios)
}

/// Least-squares line through `(ratio, latency)` samples.
pub fn fit_latency(samples: &[(f64, f64)]) -> Result<LatencyCurve, FitError> {
    if samples.len() < 2 {
        return Err(FitError::DegenerateFit(format!(
            "need at least 2 latency samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|(r, t)| !r.is_finite() || !t.is_finite()) {
        return Err(FitError::InvalidSample("non-finite latency sample".into()));
    }
    let n = samples.len() as f64;
    let mean_r = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_t = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mean_r).powi(2)).sum();
    if sxx <= f64::EPSILON * mean_r.abs().max(1.0) {
        return Err(FitError::DegenerateFit(
            "all latency samples share one ratio".into(),
        ));
    }
    let sxy: f64 = samples.iter().map(|s| (s.0 - mean_r) * (s.1 - mean_t)).sum();
    let alpha = sxy / sxx;
    Ok(LatencyCurve {
        alpha,
        beta: mean_t - alpha * mean_r,
    })
}

/// Fits `(gamma, delta)` from `(ratio vector, accuracy)` samples.
pub fn fit_accuracy(samples: &[(Vec<f64>, f64)]) -> Result<AccuracyModel, FitError> {
    let first = samples
        .first()
        .ok_or_else(|| FitError::DegenerateFit("no accuracy samples".into()))?;
    let n = first.0.len();
    if n == 0 {
        return Err(FitError::InvalidSample("ratio vectors are empty".into()));
    }
    for (p, a) in samples {
        if p.len() != n {
            return Err(FitError::DimensionMismatch {
                expected: n,
                got: p.len(),
            });
        }
        if !a.is_finite() || p.iter().any(|x| !x.is_finite()) {
            return Err(FitError::InvalidSample("non-finite accuracy sample".into()));
        }
    }
    if samples.len() < n + 1 {
        return Err(FitError::DegenerateFit(format!(
            "{} slices need at least {} accuracy samples, got {}",
            n,
            n + 1,
            samples.len()
        )));
    }

    // y = sum_i gamma_i p_i - delta  =>  columns [p_1 .. p_n, -1]
    let rows = samples.len();
    let design = DMatrix::from_fn(rows, n + 1, |r, c| if c < n { samples[r].0[c] } else { -1.0 });
    let y = DVector::from_iterator(
        rows,
        samples
            .iter()
            .map(|(_, a)| logit(a.clamp(ACC_CLAMP, 1.0 - ACC_CLAMP))),
    );
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return Err(FitError::DegenerateFit(
            "accuracy samples do not span the ratio space (rank-deficient design)".into(),
        ));
    }
    let x = svd
        .solve(&y, smax * 1e-12)
        .map_err(|e| FitError::DegenerateFit(e.to_string()))?;
    Ok(AccuracyModel {
        gamma: x.iter().take(n).copied().collect(),
        delta: x[n],
    })
}

/// Ratio vectors at which the whole pipeline is benchmarked for accuracy:
/// every uniform vector on `grid`, plus each slice alone at every non-zero
/// grid value so the design matrix has full rank.
pub fn accuracy_bench_vectors(slices: usize, grid: &[f64]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = grid.iter().map(|&g| vec![g; slices]).collect();
    if slices > 1 {
        for i in 0..slices {
            for &g in grid.iter().filter(|&&g| g != 0.0) {
                let mut p = vec![0.0; slices];
                p[i] = g;
                out.push(p);
            }
        }
    }
    out
}

/// One benchmark measurement: a ratio vector with per-stage latencies,
/// end-to-end accuracy, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSample {
    pub ratios: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Fits per-slice latency curves and the accuracy surface from a set of
/// benchmark samples.
pub fn fit_world_model(
    samples: &[BenchmarkSample],
) -> Result<(Vec<LatencyCurve>, AccuracyModel), FitError> {
    let n = samples
        .first()
        .map(|s| s.ratios.len())
        .ok_or_else(|| FitError::DegenerateFit("no benchmark samples".into()))?;
    let mut per_slice: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    let mut acc = Vec::new();
    for s in samples {
        if s.ratios.len() != n {
            return Err(FitError::DimensionMismatch {
                expected: n,
                got: s.ratios.len(),
            });
        }
        if s.latency.is_none() && s.accuracy.is_none() {
            return Err(FitError::InvalidSample(
                "sample has neither latency nor accuracy".into(),
            ));
        }
        if let Some(lat) = &s.latency {
            if lat.len() != n {
                return Err(FitError::DimensionMismatch {
                    expected: n,
                    got: lat.len(),
                });
            }
            for i in 0..n {
                per_slice[i].push((s.ratios[i], lat[i]));
            }
        }
        if let Some(a) = s.accuracy {
            acc.push((s.ratios.clone(), a));
        }
    }
    let curves = per_slice
        .iter()
        .enumerate()
        .map(|(i, pts)| {
            fit_latency(pts).map_err(|e| match e {
                FitError::DegenerateFit(msg) => FitError::DegenerateFit(format!("slice {i}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let accuracy = fit_accuracy(&acc)?;
    Ok((curves, accuracy))
}

pub const CACHE_SCHEMA_VERSION: u32 = 1;

/// Fitted parameters as stored on the controller node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCache {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub delta: f64,
    pub slices: Vec<SliceFit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceFit {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl FitCache {
    pub fn new(
        curves: &[LatencyCurve],
        accuracy: &AccuracyModel,
        config_hash: impl Into<String>,
        seed: u64,
    ) -> Self {
        FitCache {
            schema_version: CACHE_SCHEMA_VERSION,
            config_hash: config_hash.into(),
            seed,
            delta: accuracy.delta,
            slices: curves
                .iter()
                .zip(&accuracy.gamma)
                .map(|(c, &g)| SliceFit {
                    alpha: c.alpha,
                    beta: c.beta,
                    gamma: g,
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, FitError> {
        let cache: FitCache =
            toml::from_str(text).map_err(|e| FitError::InvalidSample(e.message().to_string()))?;
        if cache.schema_version != CACHE_SCHEMA_VERSION {
            return Err(FitError::InvalidSample(format!(
                "unsupported cache schema_version {}",
                cache.schema_version
            )));
        }
        if cache.slices.is_empty() {
            return Err(FitError::InvalidSample("cache lists no slices".into()));
        }
        let finite = cache.delta.is_finite()
            && cache
                .slices
                .iter()
                .all(|s| s.alpha.is_finite() && s.beta.is_finite() && s.gamma.is_finite());
        if !finite {
            return Err(FitError::InvalidSample("cache holds non-finite values".into()));
        }
        Ok(cache)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("cache serializes")
    }

    pub fn curves(&self) -> Vec<LatencyCurve> {
        self.slices.iter().map(|s| LatencyCurve::new(s.alpha, s.beta)).collect()
    }

    pub fn accuracy(&self) -> AccuracyModel {
        AccuracyModel::new(self.slices.iter().map(|s| s.gamma).collect(), self.delta)
    }
}
