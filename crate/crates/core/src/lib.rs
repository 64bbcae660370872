//! # edgeprune
//!
//! Control plane for environment-aware dynamic pruning of a model that is
//! already sliced across a pipeline of edge devices, plus a deterministic
//! discrete-event simulator used to validate it end to end.
//!
//! The pieces, bottom up:
//!
//! | Module | Role |
//! |---|---|
//! | [`model`] | channel-structured layer chain, l1 channel ranking, prune / restore surgery |
//! | [`partition`] | per-device stage profiling and the min-max contiguous placement DP |
//! | [`curvefit`] | linear per-slice latency curves and the global logistic accuracy surface |
//! | [`controller`] | SLO monitor, hysteresis trigger and the grid-constrained ratio optimizer |
//! | [`sim`] | pipeline simulator closing the loop with the controller |
//! | [`config`] | scenario documents, device presets and file formats |
//! | [`cli`] | `partition`, `fit`, `simulate` and `sweep` subcommands |

pub mod cli;
pub mod config;
pub mod controller;
pub mod curvefit;
pub mod model;
pub mod partition;
pub mod sim;

pub use controller::{
    solve_ratios, Controller, ControllerConfig, ControllerState, PruneDecision, TriggerState,
};
pub use curvefit::{fit_accuracy, fit_latency, AccuracyModel, LatencyCurve};
pub use model::{apply_prune, cost_metrics, l1_channel_ranking, restore, LayerSpec, ModelGraph, PruneMask};
pub use partition::{brute_force_partition, partition, profile_stage, DeviceProfile, PipelinePlan};
pub use sim::{run, summarize, RequestRecord, RunMetrics, Scenario};
