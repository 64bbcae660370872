//! SLO monitoring and pruning-ratio selection.
//!
//! The controller watches end-to-end latencies reported at pipeline exit.
//! When a sustained fraction of a short window exceeds the trigger
//! threshold (SLO plus a margin) and no prune happened within the cooldown,
//! it picks new per-slice ratios on a discrete grid:
//!
//! 1. the accuracy constraint `a(p) >= a_min` becomes a linear budget
//!    `sum_i gamma_i p_i >= delta + logit(a_min)`;
//! 2. slices whose predicted latency is above the target are raised one grid
//!    step at a time, best `|alpha_i| / |gamma_i|` first, while the budget
//!    holds;
//! 3. if a slice is still above target when no admissible step remains the
//!    pipeline is infeasible for this hardware, and the best the budget can
//!    do is the smallest reachable bottleneck;
//! 4. steps that turned out unnecessary are walked back in reverse order.
//!
//! Unpruning is the mirror image, gated by a deadband under the SLO and a
//! sustained calm period so the two directions never chase each other.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvefit::{logit, AccuracyModel, FitError, LatencyCurve};

/// Slack on the accuracy budget, in logit units.
pub const BUDGET_TOLERANCE: f64 = 1e-9;
/// Completion timestamps may regress by this much (seconds) before
/// [`ControllerState::record_latency`] rejects them.
pub const TIME_TOLERANCE: f64 = 1e-3;

pub const DEFAULT_GRID: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("completion time {got} precedes previous sample at {previous}")]
    NonMonotonicTime { previous: f64, got: f64 },
    #[error("{curves} latency curves but accuracy model has {slices} slices")]
    DimensionMismatch { curves: usize, slices: usize },
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
}

impl From<FitError> for ControllerError {
    fn from(e: FitError) -> Self {
        ControllerError::InvalidConfig(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub enabled: bool,
    /// End-to-end latency objective, seconds.
    pub slo: f64,
    /// Trigger threshold is `slo * (1 + trigger_margin)`.
    pub trigger_margin: f64,
    pub violation_fraction: f64,
    /// Sliding window length, seconds.
    pub window: f64,
    pub min_samples: usize,
    /// Minimum spacing between ratio changes, seconds.
    pub cooldown: f64,
    pub a_min: f64,
    pub grid: Vec<f64>,
    /// Calm time required before unpruning, seconds.
    pub unprune_idle: f64,
    /// Unprune only while latency stays under `slo * (1 - unprune_deadband)`.
    pub unprune_deadband: f64,
    /// Apply the accuracy-budget frontier when the target is unreachable.
    pub prune_on_infeasible: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            enabled: true,
            slo: 1.0,
            trigger_margin: 0.10,
            violation_fraction: 0.5,
            window: 5.0,
            min_samples: 10,
            cooldown: 30.0,
            a_min: 0.8,
            grid: DEFAULT_GRID.to_vec(),
            unprune_idle: 60.0,
            unprune_deadband: 0.10,
            prune_on_infeasible: true,
        }
    }
}

impl ControllerConfig {
    pub fn lat_trigger(&self) -> f64 {
        self.slo * (1.0 + self.trigger_margin)
    }

    /// Latency the optimizer aims for after a prune.
    pub fn prune_target(&self) -> f64 {
        self.slo * (1.0 - self.trigger_margin)
    }

    pub fn unprune_threshold(&self) -> f64 {
        self.slo * (1.0 - self.unprune_deadband)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::InvalidConfig(m.to_string()));
        if !(self.slo > 0.0 && self.slo.is_finite()) {
            return bad("slo must be positive");
        }
        if !(self.trigger_margin > 0.0 && self.trigger_margin < 1.0) {
            return bad("trigger_margin must be in (0, 1)");
        }
        if !(self.violation_fraction > 0.0 && self.violation_fraction <= 1.0) {
            return bad("violation_fraction must be in (0, 1]");
        }
        if !(self.window > 0.0 && self.window.is_finite()) {
            return bad("window must be positive");
        }
        if !(self.cooldown > 0.0 && self.cooldown.is_finite()) {
            return bad("cooldown must be positive");
        }
        if !(self.a_min > 0.0 && self.a_min < 1.0) {
            return bad("a_min must be in (0, 1)");
        }
        if !(self.unprune_idle >= 0.0 && self.unprune_idle.is_finite()) {
            return bad("unprune_idle must be non-negative");
        }
        if !(self.unprune_deadband > 0.0 && self.unprune_deadband < 1.0) {
            return bad("unprune_deadband must be in (0, 1)");
        }
        if self.grid.first() != Some(&0.0) {
            return bad("grid must start at 0");
        }
        if self.grid.iter().any(|g| !(0.0..=1.0).contains(g)) || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("grid must be strictly increasing within [0, 1]");
        }
        Ok(())
    }

    fn grid_index(&self, ratio: f64) -> Option<usize> {
        self.grid.iter().position(|&g| g == ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Normal,
    Cooldown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerState {
    Quiet,
    Overloaded,
    CoolingDown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ratios", rename_all = "snake_case")]
pub enum PruneDecision {
    NoAction,
    Prune(Vec<f64>),
    Unprune(Vec<f64>),
    /// The target cannot be met within the accuracy budget. Carries the
    /// lowest-bottleneck ratios the budget allows, when they differ from the
    /// starting ratios.
    Infeasible(Option<Vec<f64>>),
}

impl PruneDecision {
    pub fn label(&self) -> &'static str {
        match self {
            PruneDecision::NoAction => "no_action",
            PruneDecision::Prune(_) => "prune",
            PruneDecision::Unprune(_) => "unprune",
            PruneDecision::Infeasible(_) => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub latency_window: VecDeque<(f64, f64)>,
    pub last_prune_time: Option<f64>,
    pub current_ratios: Vec<f64>,
    last_time: Option<f64>,
    /// First completion of the current run of samples under the unprune
    /// threshold, the largest latency seen in that run, and its length.
    calm_since: Option<f64>,
    calm_max: f64,
    calm_count: usize,
    /// Lowest arrival rate at which each ratio vector (keyed by bit
    /// pattern) was seen overloaded.
    overload_rates: BTreeMap<Vec<u64>, f64>,
    /// Calm-period rate at which the current ratios were entered by an
    /// unprune; they are known to have held up to that load at most.
    entered_rate: Option<f64>,
    window_len: f64,
    unprune_threshold: f64,
}

impl ControllerState {
    pub fn new(config: &ControllerConfig, slices: usize) -> Self {
        ControllerState {
            latency_window: VecDeque::new(),
            last_prune_time: None,
            current_ratios: vec![0.0; slices],
            last_time: None,
            calm_since: None,
            calm_max: 0.0,
            calm_count: 0,
            overload_rates: BTreeMap::new(),
            entered_rate: None,
            window_len: config.window,
            unprune_threshold: config.unprune_threshold(),
        }
    }

    pub fn record_latency(&mut self, completion: f64, latency: f64) -> Result<(), ControllerError> {
        if let Some(prev) = self.last_time {
            if completion < prev - TIME_TOLERANCE {
                return Err(ControllerError::NonMonotonicTime {
                    previous: prev,
                    got: completion,
                });
            }
        }
        self.last_time = Some(self.last_time.map_or(completion, |p| p.max(completion)));
        self.latency_window.push_back((completion, latency));
        self.evict(completion);

        if latency > self.unprune_threshold {
            self.calm_since = None;
            self.calm_max = 0.0;
            self.calm_count = 0;
        } else if self.calm_since.is_none() {
            self.calm_since = Some(completion);
            self.calm_max = latency;
            self.calm_count = 1;
        } else {
            self.calm_max = self.calm_max.max(latency);
            self.calm_count += 1;
        }
        Ok(())
    }

    fn evict(&mut self, now: f64) {
        while let Some(&(t, _)) = self.latency_window.front() {
            if now - t > self.window_len {
                self.latency_window.pop_front();
            } else {
                break;
            }
        }
    }

    fn window_at(&self, now: f64) -> impl Iterator<Item = &(f64, f64)> {
        self.latency_window
            .iter()
            .filter(move |(t, _)| now - t <= self.window_len && *t <= now + TIME_TOLERANCE)
    }

    pub fn phase(&self, config: &ControllerConfig, now: f64) -> Phase {
        match self.last_prune_time {
            Some(t) if now - t < config.cooldown => Phase::Cooldown,
            _ => Phase::Normal,
        }
    }

    /// Marks a ratio change at `now`: restarts cooldown and the calm period.
    pub fn apply(&mut self, ratios: Vec<f64>, now: f64) {
        self.current_ratios = ratios;
        self.entered_rate = None;
        self.last_prune_time = Some(now);
        self.calm_since = None;
        self.calm_max = 0.0;
        self.calm_count = 0;
    }

    /// Remembers that the current ratios could not keep up with the load
    /// seen in the window ending at `now`.
    fn note_overload(&mut self, now: f64) {
        // completions run at service speed under a backlog; the arrival
        // times behind them show the offered load
        let (first, last, n) = self
            .window_at(now)
            .map(|&(t, l)| t - l)
            .fold((f64::INFINITY, f64::NEG_INFINITY, 0usize), |(a, b, n), x| (a.min(x), b.max(x), n + 1));
        if n < 2 || last <= first {
            return;
        }
        // an overload right after unpruning bounds the failing load by the
        // rate the unprune was judged at
        let rate = ((n - 1) as f64 / (last - first)).min(self.entered_rate.unwrap_or(f64::INFINITY));
        let entry = self.overload_rates.entry(ratio_key(&self.current_ratios)).or_insert(rate);
        *entry = entry.min(rate);
    }

    /// Upper estimate of the completion rate over the calm period, requests
    /// per second: the Poisson count plus two standard deviations.
    fn calm_rate(&self, now: f64) -> f64 {
        match self.calm_since {
            Some(since) if now > since && self.calm_count > 1 => {
                let n = (self.calm_count - 1) as f64;
                (n + 2.0 * n.sqrt()) / (now - since)
            }
            _ => 0.0,
        }
    }

    fn median_window_latency(&self, now: f64) -> Option<f64> {
        let mut v: Vec<f64> = self.window_at(now).map(|&(_, l)| l).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[(v.len() - 1) / 2])
    }
}

fn ratio_key(ratios: &[f64]) -> Vec<u64> {
    ratios.iter().map(|r| r.to_bits()).collect()
}

pub fn evaluate_trigger(state: &ControllerState, config: &ControllerConfig, now: f64) -> TriggerState {
    let threshold = config.lat_trigger();
    let (n, over) = state
        .window_at(now)
        .fold((0usize, 0usize), |(n, o), &(_, l)| (n + 1, o + usize::from(l > threshold)));
    let overloaded = n >= config.min_samples
        && n > 0
        && over as f64 / n as f64 >= config.violation_fraction;
    if !overloaded {
        TriggerState::Quiet
    } else if state.phase(config, now) == Phase::Cooldown {
        TriggerState::CoolingDown
    } else {
        TriggerState::Overloaded
    }
}

pub fn bottleneck(curves: &[LatencyCurve], ratios: &[f64]) -> f64 {
    curves
        .iter()
        .zip(ratios)
        .map(|(c, &p)| c.predict(p))
        .fold(0.0, f64::max)
}

pub fn total_latency(curves: &[LatencyCurve], ratios: &[f64]) -> f64 {
    curves.iter().zip(ratios).map(|(c, &p)| c.predict(p)).sum()
}

/// Accuracy constraint in logit space: `sum_i gamma_i p_i >= budget`.
pub fn accuracy_budget(acc: &AccuracyModel, a_min: f64) -> f64 {
    acc.delta + logit(a_min)
}

fn priority(curve: &LatencyCurve, gamma: f64) -> f64 {
    if gamma == 0.0 {
        f64::INFINITY
    } else {
        curve.alpha.abs() / gamma.abs()
    }
}

fn check_dims(curves: &[LatencyCurve], acc: &AccuracyModel, ratios: &[f64]) -> Result<(), ControllerError> {
    if curves.len() != acc.slices() || ratios.len() != curves.len() {
        return Err(ControllerError::DimensionMismatch {
            curves: curves.len(),
            slices: acc.slices(),
        });
    }
    Ok(())
}

/// Snaps a ratio vector onto grid indices, rounding up off-grid values.
fn grid_indices(config: &ControllerConfig, ratios: &[f64]) -> Vec<usize> {
    ratios
        .iter()
        .map(|&r| {
            config
                .grid_index(r)
                .unwrap_or_else(|| config.grid.iter().position(|&g| g >= r).unwrap_or(config.grid.len() - 1))
        })
        .collect()
}

/// Picks grid ratios whose predicted bottleneck is at most `target` while
/// keeping `a(p) >= a_min`, starting from `start` and never going below it.
pub fn solve_ratios(
    curves: &[LatencyCurve],
    acc: &AccuracyModel,
    config: &ControllerConfig,
    target: f64,
    start: &[f64],
) -> Result<PruneDecision, ControllerError> {
    check_dims(curves, acc, start)?;
    let grid = &config.grid;
    let top = grid.len() - 1;
    let budget = accuracy_budget(acc, config.a_min);
    let gamma = &acc.gamma;

    let mut idx = grid_indices(config, start);
    let ratios = |idx: &[usize]| idx.iter().map(|&k| grid[k]).collect::<Vec<f64>>();
    let spend = |idx: &[usize]| -> f64 { idx.iter().zip(gamma).map(|(&k, g)| g * grid[k]).sum() };
    let mut steps: Vec<usize> = Vec::new();

    // slices whose pruning raises predicted accuracy can pay for a deficit
    while spend(&idx) < budget - BUDGET_TOLERANCE {
        let pick = (0..idx.len())
            .filter(|&i| gamma[i] > 0.0 && idx[i] < top)
            .max_by(|&a, &b| gamma[a].total_cmp(&gamma[b]).then(b.cmp(&a)));
        match pick {
            Some(i) => {
                idx[i] += 1;
                steps.push(i);
            }
            None => return Ok(PruneDecision::Infeasible(None)),
        }
    }

    let floor = idx.clone();
    loop {
        let p = ratios(&idx);
        let pick = (0..idx.len())
            .filter(|&i| curves[i].predict(p[i]) > target && idx[i] < top)
            .filter(|&i| curves[i].predict(grid[idx[i] + 1]) < curves[i].predict(p[i]))
            .filter(|&i| spend(&idx) + gamma[i] * (grid[idx[i] + 1] - grid[idx[i]]) >= budget - BUDGET_TOLERANCE)
            .min_by(|&a, &b| {
                priority(&curves[b], gamma[b])
                    .total_cmp(&priority(&curves[a], gamma[a]))
                    .then(a.cmp(&b))
            });
        match pick {
            Some(i) => {
                idx[i] += 1;
                steps.push(i);
            }
            None => break,
        }
    }

    if bottleneck(curves, &ratios(&idx)) > target {
        let frontier = ratios(&lowest_bottleneck(curves, grid, &spend, budget, &floor));
        let moved = frontier.as_slice() != start;
        return Ok(PruneDecision::Infeasible(moved.then_some(frontier)));
    }

    // back off: undo steps in reverse priority while target and budget hold
    let mut order = steps.clone();
    order.sort_by(|&a, &b| {
        priority(&curves[a], gamma[a])
            .total_cmp(&priority(&curves[b], gamma[b]))
            .then(b.cmp(&a))
    });
    for i in order {
        let mut trial = idx.clone();
        trial[i] -= 1;
        let p = ratios(&trial);
        if bottleneck(curves, &p) <= target && spend(&trial) >= budget - BUDGET_TOLERANCE {
            idx = trial;
        }
    }
    Ok(PruneDecision::Prune(ratios(&idx)))
}

/// Least-pruned indices at or above `floor` achieving the smallest
/// bottleneck the accuracy budget allows.
fn lowest_bottleneck(
    curves: &[LatencyCurve],
    grid: &[f64],
    spend: &dyn Fn(&[usize]) -> f64,
    budget: f64,
    floor: &[usize],
) -> Vec<usize> {
    let mut levels: Vec<f64> = curves
        .iter()
        .zip(floor)
        .flat_map(|(c, &f)| grid[f..].iter().map(move |&g| c.predict(g)))
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    for level in levels {
        let idx: Option<Vec<usize>> = curves
            .iter()
            .zip(floor)
            .map(|(c, &f)| (f..grid.len()).find(|&k| c.predict(grid[k]) <= level))
            .collect();
        if let Some(idx) = idx {
            if spend(&idx) >= budget - BUDGET_TOLERANCE {
                return idx;
            }
        }
    }
    floor.to_vec()
}

/// Proposes lower ratios once latency has stayed under the deadbanded SLO
/// for `unprune_idle` seconds.
///
/// A candidate must keep both its predicted bottleneck and the observed
/// calm-period maximum, scaled by the predicted end-to-end change, under the
/// deadbanded SLO, and must keep its bottleneck utilization at the calm
/// period's completion rate under `1 - unprune_deadband`. A vector that was
/// overloaded before is only revisited once the rate has fallen by the
/// deadband below the rate it failed at.
pub fn evaluate_unprune(
    state: &ControllerState,
    curves: &[LatencyCurve],
    acc: &AccuracyModel,
    config: &ControllerConfig,
    now: f64,
) -> PruneDecision {
    if state.current_ratios.iter().all(|&r| r == 0.0)
        || check_dims(curves, acc, &state.current_ratios).is_err()
    {
        return PruneDecision::NoAction;
    }
    let Some(since) = state.calm_since else {
        return PruneDecision::NoAction;
    };
    if now - since < config.unprune_idle {
        return PruneDecision::NoAction;
    }
    if state.phase(config, now) == Phase::Cooldown
        || state.last_prune_time.is_some_and(|t| now - t < config.unprune_idle)
    {
        return PruneDecision::NoAction;
    }
    let threshold = config.unprune_threshold();
    let current_total = total_latency(curves, &state.current_ratios);
    let scale = if current_total > 0.0 {
        state.calm_max / current_total
    } else {
        f64::INFINITY
    };
    let rate = state.calm_rate(now);
    let max_utilization = 1.0 - config.unprune_deadband;
    let budget = accuracy_budget(acc, config.a_min);
    let grid = &config.grid;

    let mut idx = grid_indices(config, &state.current_ratios);
    // one step per slice per pass, least valuable slice first
    let mut order: Vec<usize> = (0..idx.len()).collect();
    order.sort_by(|&a, &b| {
        priority(&curves[a], acc.gamma[a])
            .total_cmp(&priority(&curves[b], acc.gamma[b]))
            .then(b.cmp(&a))
    });
    loop {
        let mut moved = false;
        for &i in &order {
            if idx[i] == 0 {
                continue;
            }
            let mut trial = idx.clone();
            trial[i] -= 1;
            let p: Vec<f64> = trial.iter().map(|&k| grid[k]).collect();
            let key = ratio_key(&p);
            let spend: f64 = acc.gamma.iter().zip(&p).map(|(g, r)| g * r).sum();
            let predicted = total_latency(curves, &p) * scale;
            let slowest = bottleneck(curves, &p);
            if slowest <= threshold
                && predicted <= threshold
                && slowest * rate <= max_utilization
                && state
                    .overload_rates
                    .get(&key)
                    .is_none_or(|&seen| rate <= max_utilization * seen)
                && spend >= budget - BUDGET_TOLERANCE
            {
                idx = trial;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    let proposal: Vec<f64> = idx.iter().map(|&k| grid[k]).collect();
    if proposal == state.current_ratios {
        PruneDecision::NoAction
    } else {
        PruneDecision::Unprune(proposal)
    }
}

/// Optional second opinion before acting on an overload, e.g. device CPU
/// utilization or queue depth. The default confirms every overload.
pub trait OverloadProbe: Send {
    fn confirm(&mut self, now: f64, window: &[(f64, f64)]) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysConfirm;

impl OverloadProbe for AlwaysConfirm {
    fn confirm(&mut self, _now: f64, _window: &[(f64, f64)]) -> bool {
        true
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time: f64,
    pub phase: Phase,
    pub trigger: TriggerState,
    pub decision: String,
    pub ratios: Vec<f64>,
    pub predicted_latency: f64,
    pub predicted_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed_latency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

/// Ratio change the controller wants applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub ratios: Vec<f64>,
    pub unprune: bool,
}

/// The decision loop: state, world model, and the decision log.
pub struct Controller {
    pub config: ControllerConfig,
    pub curves: Vec<LatencyCurve>,
    pub accuracy: AccuracyModel,
    pub state: ControllerState,
    pub log: Vec<DecisionRecord>,
    probe: Box<dyn OverloadProbe>,
    last_trigger: TriggerState,
}

impl fmt::Debug for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Controller")
            .field("config", &self.config)
            .field("curves", &self.curves)
            .field("accuracy", &self.accuracy)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl Controller {
    pub fn new(
        config: ControllerConfig,
        curves: Vec<LatencyCurve>,
        accuracy: AccuracyModel,
    ) -> Result<Self, ControllerError> {
        config.validate()?;
        if curves.len() != accuracy.slices() {
            return Err(ControllerError::DimensionMismatch {
                curves: curves.len(),
                slices: accuracy.slices(),
            });
        }
        let state = ControllerState::new(&config, curves.len());
        Ok(Controller {
            config,
            curves,
            accuracy,
            state,
            log: Vec::new(),
            probe: Box::new(AlwaysConfirm),
            last_trigger: TriggerState::Quiet,
        })
    }

    pub fn with_probe(mut self, probe: Box<dyn OverloadProbe>) -> Self {
        self.probe = probe;
        self
    }

    /// Starts from pinned ratios instead of an unpruned pipeline.
    pub fn set_initial_ratios(&mut self, ratios: Vec<f64>) {
        self.state.current_ratios = ratios;
    }

    fn record(&mut self, now: f64, trigger: TriggerState, decision: &str, ratios: Vec<f64>, observed: Option<f64>, target: Option<f64>) {
        let predicted_latency = bottleneck(&self.curves, &ratios);
        let predicted_accuracy = self.accuracy.predict(&ratios).unwrap_or(f64::NAN);
        self.log.push(DecisionRecord {
            time: now,
            phase: self.state.phase(&self.config, now),
            trigger,
            decision: decision.to_string(),
            ratios,
            predicted_latency,
            predicted_accuracy,
            observed_latency: observed,
            target,
        });
    }

    /// Feeds one completion and returns the ratio change to apply, if any.
    pub fn observe(&mut self, now: f64, latency: f64) -> Result<Option<Action>, ControllerError> {
        self.state.record_latency(now, latency)?;
        if !self.config.enabled {
            return Ok(None);
        }
        let trigger = evaluate_trigger(&self.state, &self.config, now);
        let changed = trigger != self.last_trigger;
        self.last_trigger = trigger;
        match trigger {
            TriggerState::Overloaded => {
                let window: Vec<(f64, f64)> = self.state.latency_window.iter().copied().collect();
                if !self.probe.confirm(now, &window) {
                    return Ok(None);
                }
                Ok(self.decide_prune(now))
            }
            TriggerState::CoolingDown => {
                if changed {
                    let r = self.state.current_ratios.clone();
                    self.record(now, trigger, "no_action", r, self.state.median_window_latency(now), None);
                }
                Ok(None)
            }
            TriggerState::Quiet => {
                match evaluate_unprune(&self.state, &self.curves, &self.accuracy, &self.config, now) {
                    PruneDecision::Unprune(p) => {
                        let observed = Some(self.state.calm_max);
                        self.record(now, trigger, "unprune", p.clone(), observed, Some(self.config.unprune_threshold()));
                        let rate = self.state.calm_rate(now);
                        self.state.apply(p.clone(), now);
                        self.state.entered_rate = (rate > 0.0).then_some(rate);
                        Ok(Some(Action { ratios: p, unprune: true }))
                    }
                    _ => Ok(None),
                }
            }
        }
    }

    fn decide_prune(&mut self, now: f64) -> Option<Action> {
        self.state.note_overload(now);
        let current = self.state.current_ratios.clone();
        let observed = self.state.median_window_latency(now);
        let base = self.config.prune_target();
        let predicted = bottleneck(&self.curves, &current);
        // observed latency includes queueing and transfers the curves do not
        // see; tighten the target by the same factor
        let target = match observed {
            Some(o) if o > predicted && predicted > 0.0 => base * predicted / o,
            _ => base,
        };
        let decision = match solve_ratios(&self.curves, &self.accuracy, &self.config, target, &current) {
            Ok(d) => d,
            Err(_) => return None,
        };
        let trigger = TriggerState::Overloaded;
        let chosen = match decision {
            PruneDecision::Prune(p) => Some(p),
            PruneDecision::Infeasible(frontier) => {
                self.record(now, trigger, "infeasible", current.clone(), observed, Some(target));
                if self.config.prune_on_infeasible {
                    frontier
                } else {
                    None
                }
            }
            _ => None,
        };
        match chosen {
            Some(p) if p != current => {
                self.record(now, trigger, "prune", p.clone(), observed, Some(target));
                self.state.apply(p.clone(), now);
                Some(Action { ratios: p, unprune: false })
            }
            _ => {
                // nothing left to gain; hold off until the cooldown passes
                self.record(now, trigger, "no_action", current.clone(), observed, Some(target));
                self.state.last_prune_time = Some(now);
                None
            }
        }
    }

    /// Decision log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ControllerConfig {
        ControllerConfig {
            slo: 1.0,
            ..ControllerConfig::default()
        }
    }

    fn filled(config: &ControllerConfig, over: usize, total: usize) -> ControllerState {
        let mut s = ControllerState::new(config, 2);
        for k in 0..total {
            let lat = if k < over { 2.0 } else { 0.5 };
            s.record_latency(10.0 + 0.1 * k as f64, lat).unwrap();
        }
        s
    }

    #[test]
    fn window_eviction() {
        let c = ControllerConfig { window: 5.0, ..cfg() };
        let mut s = ControllerState::new(&c, 1);
        s.record_latency(1.0, 0.8).unwrap();
        assert_eq!(s.latency_window.len(), 1);
        s.record_latency(7.0, 0.8).unwrap();
        assert_eq!(s.latency_window.len(), 1);
        assert_eq!(s.latency_window[0].0, 7.0);
        let mut many = ControllerState::new(&c, 1);
        for k in 0..1000 {
            many.record_latency(k as f64 * 0.001, 0.1).unwrap();
        }
        assert_eq!(many.latency_window.len(), 1000);
    }

    #[test]
    fn time_regression_is_rejected() {
        let c = cfg();
        let mut s = ControllerState::new(&c, 1);
        s.record_latency(5.0, 0.1).unwrap();
        s.record_latency(4.9995, 0.1).unwrap();
        assert!(matches!(
            s.record_latency(4.9, 0.1),
            Err(ControllerError::NonMonotonicTime { .. })
        ));
    }

    #[test]
    fn trigger_states() {
        let c = cfg();
        let s = filled(&c, 6, 10);
        assert_eq!(evaluate_trigger(&s, &c, 11.0), TriggerState::Overloaded);
        let mut cooling = s.clone();
        cooling.last_prune_time = Some(9.0);
        assert_eq!(evaluate_trigger(&cooling, &c, 11.0), TriggerState::CoolingDown);
        let quiet = filled(&c, 4, 10);
        assert_eq!(evaluate_trigger(&quiet, &c, 11.0), TriggerState::Quiet);
        let few = filled(&c, 9, 9);
        assert_eq!(evaluate_trigger(&few, &c, 11.0), TriggerState::Quiet);
    }

    fn two_slice() -> (Vec<LatencyCurve>, AccuracyModel, ControllerConfig) {
        let curves = vec![LatencyCurve::new(-3.33, 3.0); 2];
        let acc = AccuracyModel::new(vec![-0.5, -0.5], -3.0);
        let config = ControllerConfig { a_min: 0.8, ..cfg() };
        (curves, acc, config)
    }

    #[test]
    fn solve_two_slice_example() {
        let (curves, acc, config) = two_slice();
        let d = solve_ratios(&curves, &acc, &config, 2.1, &[0.0, 0.0]).unwrap();
        assert_eq!(d, PruneDecision::Prune(vec![0.5, 0.5]));
        // (0.25, 0.25) misses the target: 3 - 3.33 * 0.25 = 2.1675
        assert!(curves[0].predict(0.25) > 2.1);
    }

    #[test]
    fn solve_infeasible_when_unpruned_accuracy_is_too_low() {
        let (curves, acc, mut config) = two_slice();
        config.a_min = 0.999;
        let d = solve_ratios(&curves, &acc, &config, 2.1, &[0.0, 0.0]).unwrap();
        assert_eq!(d, PruneDecision::Infeasible(None));
        let loose = solve_ratios(&curves, &acc, &config, 10.0, &[0.0, 0.0]).unwrap();
        assert_eq!(loose, PruneDecision::Infeasible(None));
    }

    #[test]
    fn solve_no_pruning_needed() {
        let (curves, acc, config) = two_slice();
        let d = solve_ratios(&curves, &acc, &config, 3.0, &[0.0, 0.0]).unwrap();
        assert_eq!(d, PruneDecision::Prune(vec![0.0, 0.0]));
    }

    #[test]
    fn solve_reports_frontier_when_target_unreachable() {
        let curves = vec![LatencyCurve::new(-1.0, 2.0), LatencyCurve::new(-1.0, 2.0)];
        // budget allows sum p <= 1
        let acc = AccuracyModel::new(vec![-1.0, -1.0], -(1.0 + logit(0.8)));
        let config = ControllerConfig { a_min: 0.8, ..cfg() };
        let d = solve_ratios(&curves, &acc, &config, 1.0, &[0.0, 0.0]).unwrap();
        match d {
            PruneDecision::Infeasible(Some(p)) => {
                assert!(acc.predict(&p).unwrap() >= 0.8 - 1e-9);
                assert!(p.iter().sum::<f64>() <= 1.0 + 1e-12);
                assert!(p.iter().any(|&r| r > 0.0));
            }
            other => panic!("expected frontier, got {other:?}"),
        }
    }

    #[test]
    fn infeasible_frontier_minimizes_bottleneck() {
        // sum p <= 0.5. Stepping the steeper slice alone stalls at a 1.2 s
        // bottleneck; splitting the budget reaches 1.1 s.
        let curves = vec![LatencyCurve::new(-1.0, 1.2), LatencyCurve::new(-2.0, 1.6)];
        let acc = AccuracyModel::new(vec![-1.0, -1.0], -(0.5 + logit(0.8)));
        let config = ControllerConfig { a_min: 0.8, ..cfg() };
        let d = solve_ratios(&curves, &acc, &config, 0.5, &[0.0, 0.0]).unwrap();
        assert_eq!(d, PruneDecision::Infeasible(Some(vec![0.25, 0.25])));
    }

    #[test]
    fn useless_pruning_is_not_proposed() {
        // only the fast slice is affordable and it is not the bottleneck
        let curves = vec![LatencyCurve::new(-1.0, 1.2), LatencyCurve::new(-4.0, 1.2)];
        let acc = AccuracyModel::new(vec![-2.0, -1.0], -(0.3 + logit(0.8)));
        let config = ControllerConfig { a_min: 0.8, ..cfg() };
        let d = solve_ratios(&curves, &acc, &config, 1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(d, PruneDecision::Infeasible(None));
    }

    #[test]
    fn dimension_mismatch() {
        let (curves, _, config) = two_slice();
        let acc = AccuracyModel::new(vec![-1.0], 0.0);
        assert!(matches!(
            solve_ratios(&curves, &acc, &config, 1.0, &[0.0, 0.0]),
            Err(ControllerError::DimensionMismatch { .. })
        ));
    }

    fn calm_state(config: &ControllerConfig, ratios: Vec<f64>, latency: f64) -> ControllerState {
        let mut s = ControllerState::new(config, ratios.len());
        s.apply(ratios, 0.0);
        for k in 0..=46 {
            s.record_latency(k as f64 * 1.5, latency).unwrap();
        }
        s
    }

    #[test]
    fn unprune_respects_arrival_rate() {
        // 1.25 req/s: only vectors with a bottleneck of at most 0.72 s keep
        // utilization under 0.9
        let curves = vec![LatencyCurve::new(-1.0, 1.0); 2];
        let acc = AccuracyModel::new(vec![-1.0, -1.0], -3.0);
        let config = ControllerConfig { slo: 2.0, unprune_deadband: 0.1, a_min: 0.5, ..cfg() };
        let mut s = ControllerState::new(&config, 2);
        s.apply(vec![0.5, 0.5], 0.0);
        for k in 0..=100 {
            s.record_latency(k as f64 * 0.8, 1.2).unwrap();
        }
        assert_eq!(evaluate_unprune(&s, &curves, &acc, &config, 80.0), PruneDecision::NoAction);
    }

    #[test]
    fn overload_after_unprune_is_bounded_by_entry_rate() {
        let config = ControllerConfig { slo: 2.0, ..cfg() };
        let mut s = ControllerState::new(&config, 2);
        s.entered_rate = Some(0.5);
        // window arrivals spread at 2 req/s
        for k in 0..10 {
            s.record_latency(100.0 + k as f64 * 0.5, 3.0).unwrap();
        }
        s.note_overload(104.5);
        assert_eq!(s.overload_rates.get(&ratio_key(&[0.0, 0.0])), Some(&0.5));
        s.apply(vec![0.25, 0.25], 104.5);
        assert_eq!(s.entered_rate, None);
    }

    #[test]
    fn unprune_steps_down_under_deadband() {
        let curves = vec![LatencyCurve::new(-1.0, 1.0); 2];
        let acc = AccuracyModel::new(vec![-1.0, -1.0], -3.0);
        let config = ControllerConfig { slo: 2.0, unprune_deadband: 0.1, a_min: 0.5, ..cfg() };
        // 40% under the SLO
        let s = calm_state(&config, vec![0.5, 0.5], 1.2);
        let d = evaluate_unprune(&s, &curves, &acc, &config, 70.0);
        assert_eq!(d, PruneDecision::Unprune(vec![0.25, 0.25]));
    }

    #[test]
    fn unprune_needs_pruned_state_and_calm() {
        let curves = vec![LatencyCurve::new(-1.0, 1.0); 2];
        let acc = AccuracyModel::new(vec![-1.0, -1.0], -3.0);
        let config = ControllerConfig { slo: 2.0, a_min: 0.5, ..cfg() };
        let zero = calm_state(&config, vec![0.0, 0.0], 1.2);
        assert_eq!(evaluate_unprune(&zero, &curves, &acc, &config, 70.0), PruneDecision::NoAction);
        let mut spiky = calm_state(&config, vec![0.5, 0.5], 1.2);
        spiky.record_latency(70.05, 1.9).unwrap();
        assert_eq!(evaluate_unprune(&spiky, &curves, &acc, &config, 70.1), PruneDecision::NoAction);
        let early = calm_state(&config, vec![0.5, 0.5], 1.2);
        assert_eq!(evaluate_unprune(&early, &curves, &acc, &config, 30.0), PruneDecision::NoAction);
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        let bad = [
            ControllerConfig { trigger_margin: 0.0, ..cfg() },
            ControllerConfig { cooldown: 0.0, ..cfg() },
            ControllerConfig { unprune_deadband: 0.0, ..cfg() },
            ControllerConfig { grid: vec![0.25, 0.5], ..cfg() },
            ControllerConfig { grid: vec![0.0, 0.5, 0.5], ..cfg() },
            ControllerConfig { a_min: 1.0, ..cfg() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn controller_prunes_once_per_cooldown() {
        let curves = vec![LatencyCurve::new(-1.0, 0.6), LatencyCurve::new(-1.0, 0.6)];
        let acc = AccuracyModel::new(vec![-1.0, -1.0], -3.0);
        let config = ControllerConfig { slo: 1.0, a_min: 0.5, ..cfg() };
        let mut ctl = Controller::new(config, curves, acc).unwrap();
        let mut actions = Vec::new();
        for k in 0..400 {
            let t = k as f64 * 0.1;
            if let Some(a) = ctl.observe(t, 1.5).unwrap() {
                actions.push((t, a));
            }
        }
        assert!(actions.len() >= 2);
        for w in actions.windows(2) {
            assert!(w[1].0 - w[0].0 >= 30.0);
        }
        assert!(!actions[0].1.unprune);
        assert!(ctl.log_jsonl().lines().count() >= 2);
    }
}
