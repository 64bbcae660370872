#![allow(dead_code)]

use std::path::PathBuf;

use edgeprune::config::LoadedConfig;
use edgeprune::controller::{bottleneck, total_latency, ControllerConfig, DEFAULT_GRID};
use edgeprune::curvefit::{AccuracyModel, LatencyCurve};
use edgeprune::partition::DeviceProfile;
use edgeprune::sim::{Scenario, StageSpec};

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load_scenario(name: &str) -> LoadedConfig {
    LoadedConfig::from_path(&scenarios_dir().join(name)).expect("bundled scenario loads")
}

/// A stage on a unit-speed device with free links.
pub fn stage(id: usize, alpha: f64, beta: f64) -> StageSpec {
    StageSpec {
        device: DeviceProfile::new(format!("d{id}"), 1.0),
        curve: LatencyCurve::new(alpha, beta),
        boundary_channels: 16,
        bytes_per_channel: 0.0,
    }
}

pub fn pinned_scenario(stages: Vec<StageSpec>, arrivals: Vec<f64>, ratios: Vec<f64>) -> Scenario {
    let n = stages.len();
    let acc = AccuracyModel::new(vec![-1.0; n], -3.0);
    Scenario {
        stages,
        accuracy_model: acc.clone(),
        ground_truth_accuracy: acc,
        controller: ControllerConfig {
            enabled: false,
            slo: 100.0,
            ..ControllerConfig::default()
        },
        arrivals,
        prune_overhead_s: 0.0,
        initial_ratios: Some(ratios),
    }
}

/// Every ratio vector over `grid` for `n` slices.
pub fn grid_vectors(n: usize, grid: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|v| {
                grid.iter().map(move |&g| {
                    let mut w = v.clone();
                    w.push(g);
                    w
                })
            })
            .collect();
    }
    out
}

/// Exhaustive grid search for the ratio choice: among vectors meeting the
/// accuracy floor and the bottleneck target, the one with the highest
/// predicted accuracy, then the lowest total latency.
pub fn oracle_ratios(
    curves: &[LatencyCurve],
    acc: &AccuracyModel,
    a_min: f64,
    target: f64,
) -> Option<Vec<f64>> {
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for p in grid_vectors(curves.len(), &DEFAULT_GRID) {
        let a = acc.predict(&p).unwrap();
        if a < a_min - 1e-9 || bottleneck(curves, &p) > target {
            continue;
        }
        let t = total_latency(curves, &p);
        let better = match &best {
            None => true,
            Some((ba, bt, _)) => a > *ba || (a == *ba && t < *bt),
        };
        if better {
            best = Some((a, t, p));
        }
    }
    best.map(|(_, _, p)| p)
}

/// Largest gap between neighbouring points of the default grid.
pub fn max_grid_gap() -> f64 {
    DEFAULT_GRID.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}
