//! Deterministic discrete-event simulation of a pipelined inference
//! deployment with the pruning controller in the loop.
//!
//! Each stage serves one request at a time from a FIFO queue. Service time
//! is the stage's latency curve at its current ratio, stretched by whatever
//! slowdowns are active on the device. Between stages a request pays the
//! link latency plus its activation payload over the link bandwidth; the
//! payload shrinks with the boundary layer's surviving channels.
//!
//! A ratio change blocks every stage for the prune overhead starting at the
//! decision instant. A request already in service is paused for the same
//! overhead and finishes at its old ratio; the new ratio vector takes effect
//! for every service that starts after the stall.

mod metrics;
pub mod workload;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Controller, ControllerConfig, ControllerError, DecisionRecord};
use crate::curvefit::{AccuracyModel, LatencyCurve};
use crate::model::surviving_channel_count;
use crate::partition::DeviceProfile;

pub use metrics::{nearest_rank, summarize, AccuracyPoint, PruneEvent, RequestRecord, RunMetrics};
pub use workload::{constant_arrivals, generate_poisson_arrivals, parse_trace, Burst, BurstyTrace};

pub const DEFAULT_PRUNE_OVERHEAD_S: f64 = 0.025;
pub const DEFAULT_BYTES_PER_CHANNEL: f64 = 4096.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("run produced no requests")]
    EmptyRun,
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// One pipeline stage as the simulator sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub device: DeviceProfile,
    /// Service-time curve, seconds at nominal device speed.
    pub curve: LatencyCurve,
    /// Output channels of the stage's last layer before pruning.
    pub boundary_channels: usize,
    pub bytes_per_channel: f64,
}

impl StageSpec {
    /// Seconds to move one request's activations to the next stage.
    pub fn transfer_time(&self, ratio: f64) -> f64 {
        let payload = surviving_channel_count(self.boundary_channels, ratio) as f64 * self.bytes_per_channel;
        let wire = if self.device.bandwidth_out.is_infinite() {
            0.0
        } else {
            payload / self.device.bandwidth_out
        };
        self.device.link_latency + wire
    }

    /// Completion time of a service of nominal length `work_s` starting at
    /// `start`, integrating the device's piecewise-constant speed.
    pub fn finish_time(&self, start: f64, work_s: f64) -> f64 {
        if work_s <= 0.0 {
            return start;
        }
        let dev = &self.device;
        if dev.slowdowns.is_empty() {
            return start + work_s;
        }
        let mut edges: Vec<f64> = dev
            .slowdowns
            .iter()
            .flat_map(|s| [s.start_s, s.end_s()])
            .filter(|&e| e > start)
            .collect();
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        let mut t = start;
        let mut remaining = work_s;
        for edge in edges {
            let m = dev.speed_multiplier_at(t);
            let capacity = (edge - t) * m;
            if remaining <= capacity {
                return t + remaining / m;
            }
            remaining -= capacity;
            t = edge;
        }
        t + remaining / dev.speed_multiplier_at(t)
    }
}

/// A fully resolved simulation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub stages: Vec<StageSpec>,
    /// The controller's fitted accuracy model.
    pub accuracy_model: AccuracyModel,
    /// The world's true accuracy, used only for reporting.
    pub ground_truth_accuracy: AccuracyModel,
    pub controller: ControllerConfig,
    pub arrivals: Vec<f64>,
    pub prune_overhead_s: f64,
    /// Ratios in effect at t = 0. With the controller disabled they stay
    /// pinned for the whole run.
    pub initial_ratios: Option<Vec<f64>>,
}

impl Scenario {
    pub fn slices(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.stages.len();
        if n == 0 {
            return Err(SimError::Config("scenario has no stages".into()));
        }
        for s in &self.stages {
            s.device.validate().map_err(SimError::Config)?;
            if !(s.curve.alpha.is_finite() && s.curve.beta.is_finite()) {
                return Err(SimError::Config(format!("stage {} has a non-finite curve", s.device.id)));
            }
            if !(s.bytes_per_channel >= 0.0 && s.bytes_per_channel.is_finite()) {
                return Err(SimError::Config("bytes_per_channel must be non-negative".into()));
            }
        }
        if self.accuracy_model.slices() != n || self.ground_truth_accuracy.slices() != n {
            return Err(SimError::Config(format!(
                "{n} stages but accuracy models cover {} and {} slices",
                self.accuracy_model.slices(),
                self.ground_truth_accuracy.slices()
            )));
        }
        self.controller.validate()?;
        if !(self.prune_overhead_s >= 0.0 && self.prune_overhead_s.is_finite()) {
            return Err(SimError::Config("prune_overhead_s must be non-negative".into()));
        }
        if self.arrivals.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(SimError::Config("arrival times must be finite and non-negative".into()));
        }
        if let Some(r) = &self.initial_ratios {
            if r.len() != n {
                return Err(SimError::Config(format!("{} initial ratios for {n} stages", r.len())));
            }
            if r.iter().any(|x| !self.controller.grid.contains(x)) {
                return Err(SimError::Config("initial ratios must lie on the controller grid".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub records: Vec<RequestRecord>,
    pub decisions: Vec<DecisionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Arrival { req: usize },
    ServiceDone { stage: usize, req: usize, token: u64 },
    TransferDone { stage: usize, req: usize },
    RatiosApplied,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
struct StageState {
    queue: VecDeque<usize>,
    /// Request in service, its scheduled end, and the event token.
    busy: Option<(usize, f64, u64)>,
    blocked_until: f64,
}

struct Engine<'a> {
    scenario: &'a Scenario,
    events: BinaryHeap<Event>,
    seq: u64,
    stages: Vec<StageState>,
    ratios: Vec<f64>,
    pending: Option<(f64, Vec<f64>, bool)>,
    records: Vec<RequestRecord>,
    done: Vec<bool>,
    controller: Option<Controller>,
    prune_events: Vec<PruneEvent>,
    accuracy_timeline: Vec<AccuracyPoint>,
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event { time, seq: self.seq, kind });
    }

    fn try_start(&mut self, stage: usize, now: f64) {
        let st = &mut self.stages[stage];
        if st.busy.is_some() || self.pending.is_some() || now < st.blocked_until {
            return;
        }
        let Some(req) = st.queue.pop_front() else {
            return;
        };
        let spec = &self.scenario.stages[stage];
        let ratio = self.ratios[stage];
        let end = spec.finish_time(now, spec.curve.predict(ratio));
        self.seq += 1;
        let token = self.seq;
        st.busy = Some((req, end, token));
        let rec = &mut self.records[req];
        rec.stage_start[stage] = now;
        rec.ratios_in_effect[stage] = ratio;
        self.push(end, EventKind::ServiceDone { stage, req, token });
    }

    fn begin_change(&mut self, now: f64, ratios: Vec<f64>, unprune: bool) {
        let overhead = self.scenario.prune_overhead_s;
        let resume = now + overhead;
        for k in 0..self.stages.len() {
            self.stages[k].blocked_until = resume;
            if let Some((req, end, _)) = self.stages[k].busy {
                self.seq += 1;
                let token = self.seq;
                let new_end = end + overhead;
                self.stages[k].busy = Some((req, new_end, token));
                self.push(new_end, EventKind::ServiceDone { stage: k, req, token });
            }
        }
        self.pending = Some((now, ratios, unprune));
        self.push(resume, EventKind::RatiosApplied);
    }

    fn complete(&mut self, req: usize, now: f64) {
        let slo = self.scenario.controller.slo;
        let rec = &mut self.records[req];
        rec.completion_s = now;
        rec.latency_s = now - rec.arrival_s;
        rec.slo_met = rec.latency_s <= slo;
        self.done[req] = true;
        let latency = rec.latency_s;
        let Some(ctl) = self.controller.as_mut() else {
            return;
        };
        if self.pending.is_some() {
            // a change is in flight; keep monitoring but hold decisions
            let _ = ctl.state.record_latency(now, latency);
            return;
        }
        if let Some(action) = ctl.observe(now, latency).ok().flatten() {
            if action.ratios != self.ratios {
                self.begin_change(now, action.ratios, action.unprune);
            }
        }
    }

    fn step(&mut self, ev: Event) {
        let now = ev.time;
        let last = self.stages.len() - 1;
        match ev.kind {
            EventKind::Arrival { req } => {
                self.stages[0].queue.push_back(req);
                self.try_start(0, now);
            }
            EventKind::ServiceDone { stage, req, token } => {
                match self.stages[stage].busy {
                    Some((_, _, t)) if t == token => {}
                    _ => return,
                }
                self.stages[stage].busy = None;
                self.records[req].stage_end[stage] = now;
                if stage == last {
                    self.complete(req, now);
                } else {
                    let ratio = self.records[req].ratios_in_effect[stage];
                    let delay = self.scenario.stages[stage].transfer_time(ratio);
                    self.push(now + delay, EventKind::TransferDone { stage: stage + 1, req });
                }
                self.try_start(stage, now);
            }
            EventKind::TransferDone { stage, req } => {
                self.stages[stage].queue.push_back(req);
                self.try_start(stage, now);
            }
            EventKind::RatiosApplied => {
                if let Some((decided, new, unprune)) = self.pending.take() {
                    let old = std::mem::replace(&mut self.ratios, new.clone());
                    self.prune_events.push(PruneEvent {
                        decided_s: decided,
                        applied_s: now,
                        unprune,
                        old,
                        new: new.clone(),
                    });
                    let accuracy = self
                        .scenario
                        .ground_truth_accuracy
                        .predict(&new)
                        .expect("dimensions validated");
                    self.accuracy_timeline.push(AccuracyPoint { time_s: now, accuracy });
                }
                for k in 0..self.stages.len() {
                    self.try_start(k, now);
                }
            }
        }
    }
}

/// Runs the scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunOutput, SimError> {
    scenario.validate()?;
    let n = scenario.slices();
    let initial = scenario.initial_ratios.clone().unwrap_or_else(|| vec![0.0; n]);

    let controller = if scenario.controller.enabled {
        let curves = scenario.stages.iter().map(|s| s.curve).collect();
        let mut c = Controller::new(scenario.controller.clone(), curves, scenario.accuracy_model.clone())?;
        c.set_initial_ratios(initial.clone());
        Some(c)
    } else {
        None
    };

    let mut arrivals = scenario.arrivals.clone();
    arrivals.sort_by(f64::total_cmp);
    let records = arrivals
        .iter()
        .enumerate()
        .map(|(id, &a)| RequestRecord {
            id,
            arrival_s: a,
            stage_start: vec![f64::NAN; n],
            stage_end: vec![f64::NAN; n],
            completion_s: f64::NAN,
            latency_s: f64::NAN,
            slo_met: false,
            ratios_in_effect: vec![f64::NAN; n],
        })
        .collect();

    let start_accuracy = scenario.ground_truth_accuracy.predict(&initial).expect("dimensions validated");
    let mut engine = Engine {
        scenario,
        events: BinaryHeap::with_capacity(arrivals.len() * 2),
        seq: 0,
        stages: (0..n).map(|_| StageState::default()).collect(),
        ratios: initial,
        pending: None,
        records,
        done: vec![false; arrivals.len()],
        controller,
        prune_events: Vec::new(),
        accuracy_timeline: vec![AccuracyPoint { time_s: 0.0, accuracy: start_accuracy }],
    };
    for (req, &t) in arrivals.iter().enumerate() {
        engine.push(t, EventKind::Arrival { req });
    }
    while let Some(ev) = engine.events.pop() {
        engine.step(ev);
    }
    debug_assert!(engine.done.iter().all(|&d| d));

    let mut metrics = summarize(&engine.records, scenario.controller.slo)?;
    metrics.prune_events = engine.prune_events;
    metrics.accuracy_timeline = engine.accuracy_timeline;
    let decisions = engine.controller.map(|c| c.log).unwrap_or_default();
    Ok(RunOutput {
        metrics,
        records: engine.records,
        decisions,
    })
}

/// Per-request CSV: id, arrival, completion, latency, slo_met, ratios.
pub fn records_csv(records: &[RequestRecord], header: &str) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["id", "arrival_s", "completion_s", "latency_s", "slo_met", "ratios"])
        .expect("in-memory write");
    for r in records {
        let ratios = r
            .ratios_in_effect
            .iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.id.to_string(),
            format!("{:.9}", r.arrival_s),
            format!("{:.9}", r.completion_s),
            format!("{:.9}", r.latency_s),
            r.slo_met.to_string(),
            ratios,
        ])
        .expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("flush")).expect("utf8");
    format!("{header}{body}")
}
