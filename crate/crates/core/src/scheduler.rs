//! Priority- and interference-aware batch scheduling.
//!
//! A scheduling pass walks the model queues in descending priority (oldest
//! front request first within a class), early-drops hopeless requests, then
//! binary-searches the largest batch size for which some GPU has a free slot,
//! would not push an equal-or-higher-priority running batch past its deadline,
//! keeps the low-priority throughput under the AIMD cap, and is predicted to
//! meet the batch's own deadline. The batch goes to the feasible GPU with the
//! lowest estimated latency.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, ReactiveConfig, ReactiveState};
use crate::model::{
    sum_throughput, Batch, GpuRuntimeState, Millis, ModelProfile, PriorityLevel, Request, RunningTaskEntry,
    ThroughputTimeline, TimelineError,
};
use crate::pcie::PcieError;
use crate::predictor::{FeedbackSample, LatencyEstimate, Predictor, PredictorError, UpdateOutcome};
use crate::profile::ProfileSet;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("batch {batch} is not running on gpu {gpu}")]
    UnknownEntry { gpu: usize, batch: u64 },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Pcie(#[from] PcieError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AimdConfig {
    pub floor: f64,
    pub ceiling: f64,
    /// Additive step, in percent, per elapsed tick.
    pub increase: f64,
    pub tick: Millis,
}

impl Default for AimdConfig {
    fn default() -> Self {
        Self {
            floor: 75.0,
            ceiling: 100.0,
            increase: 0.25,
            tick: 100.0,
        }
    }
}

/// Cap on the aggregate throughput of low-priority batches on one GPU, in
/// percent of peak per metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AimdState {
    pub c_low: f64,
    pub config: AimdConfig,
    pub last_tick: Millis,
}

impl AimdState {
    pub fn new(config: AimdConfig, now: Millis) -> Self {
        Self {
            c_low: config.floor,
            config,
            last_tick: now,
        }
    }

    pub fn fraction(&self) -> f64 {
        self.c_low / 100.0
    }

    /// Adds `increase` per whole tick elapsed since `last_tick`, up to the
    /// ceiling. Returns true if `c_low` changed.
    pub fn tick(&mut self, now: Millis) -> bool {
        let elapsed = now - self.last_tick;
        if elapsed < self.config.tick {
            return false;
        }
        let ticks = ((elapsed + 1e-9) / self.config.tick).floor();
        self.last_tick += ticks * self.config.tick;
        let before = self.c_low;
        let mut c = self.c_low;
        for _ in 0..ticks as u64 {
            if c >= self.config.ceiling {
                break;
            }
            c += self.config.increase;
        }
        self.c_low = c.min(self.config.ceiling);
        self.c_low != before
    }

    /// Back to the floor after a high-priority deadline miss.
    pub fn reset_on_hp_violation(&mut self) -> bool {
        let changed = self.c_low != self.config.floor;
        self.c_low = self.config.floor;
        changed
    }
}

pub fn aimd_tick(mut state: AimdState, now: Millis) -> AimdState {
    state.tick(now);
    state
}

pub fn aimd_on_hp_violation(mut state: AimdState) -> AimdState {
    state.reset_on_hp_violation();
    state
}

/// Front-end FIFO for one model.
#[derive(Debug, Clone)]
pub struct TaskQueue {
    pub model: usize,
    pub priority: PriorityLevel,
    pub batch_timeout: Millis,
    pub max_batch_size: usize,
    pub pending: VecDeque<Request>,
    /// Front request's enqueue time plus the batch timeout.
    pub timeout_deadline: Option<Millis>,
}

impl TaskQueue {
    pub fn new(model: usize, profile: &ModelProfile) -> Self {
        Self {
            model,
            priority: profile.priority,
            batch_timeout: profile.batch_timeout,
            max_batch_size: profile.max_batch_size,
            pending: VecDeque::new(),
            timeout_deadline: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn push(&mut self, r: Request) {
        self.pending.push_back(r);
        self.refresh_timeout();
    }

    pub fn front_enqueue(&self) -> Option<Millis> {
        self.pending.front().map(|r| r.arrival_time)
    }

    pub fn refresh_timeout(&mut self) {
        self.timeout_deadline = self.front_enqueue().map(|t| t + self.batch_timeout);
    }

    /// A queue is ready once it can fill a maximal batch or its front request
    /// has waited out the batch timeout.
    pub fn is_ready(&self, now: Millis) -> bool {
        self.len() >= self.max_batch_size || self.timeout_deadline.is_some_and(|t| now >= t)
    }

    pub fn take_front(&mut self, n: usize) -> Vec<Request> {
        let out = self.pending.drain(..n).collect();
        self.refresh_timeout();
        out
    }
}

/// Removes every request that cannot finish by its deadline even when served
/// alone at batch size 1. Order of the survivors is preserved.
pub fn early_drop(queue: &mut TaskQueue, now: Millis, profile: &ModelProfile) -> Vec<Request> {
    let floor = profile.inf(1);
    let mut dropped = Vec::new();
    queue.pending.retain(|r| {
        let keep = r.deadline_abs - now >= floor;
        if !keep {
            dropped.push(r.clone());
        }
        keep
    });
    queue.refresh_timeout();
    dropped
}

/// A prospective batch: the first `size` requests of a queue.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub profile: &'a ModelProfile,
    pub size: usize,
    pub front_enqueue: Millis,
    pub deadline_abs: Millis,
}

impl Candidate<'_> {
    pub fn priority(&self) -> PriorityLevel {
        self.profile.priority
    }

    pub fn throughput(&self) -> &[f64] {
        self.profile.throughput(self.size)
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Projected completion of a running batch if its remaining kernel work ran
/// under `intf_remaining`.
fn projected_completion(
    entry: &RunningTaskEntry,
    predictor: &Predictor,
    now: Millis,
    intf_remaining: f64,
) -> Result<Millis, SchedulerError> {
    let end = match entry.batch.kernel_start {
        Some(start) => {
            let m_now = if entry.timeline.is_empty() {
                vec![0.0; predictor.params.metric_count()]
            } else {
                entry.timeline.time_weighted_average(now.max(start))?
            };
            let intf_now = predictor.predict_intf(&m_now, entry.self_cmp, entry.self_mem, entry.priority())?;
            let done = ((now - start) / (intf_now * entry.t_kernel_isol)).clamp(0.0, 1.0);
            now.max(start) + (1.0 - done) * entry.t_kernel_isol * intf_remaining
        }
        None => now.max(entry.kernel_start_estimate) + entry.t_kernel_isol * intf_remaining,
    };
    Ok(end + entry.t_residual)
}

/// Whether dispatching `cand` to `gpu` now breaks a constraint:
///
/// * (a) a low-priority candidate lifts the aggregate profiled throughput of
///   low-priority batches above `c_low` on any metric;
/// * (b) some running batch of equal or higher priority that would have met
///   its deadline is projected to miss it once the candidate co-locates.
///
/// For (b) the completed fraction of a running kernel is estimated from its
/// elapsed time under the interference predicted from its time-weighted
/// co-location history; the remainder is assumed to run under the aggregate
/// that includes the candidate.
pub fn check_violate(
    gpu: &GpuRuntimeState,
    cand: &Candidate<'_>,
    predictor: &Predictor,
    now: Millis,
) -> Result<bool, SchedulerError> {
    if cand.priority() == PriorityLevel::Low {
        let lp = gpu.aggregate_where(|e| e.priority() == PriorityLevel::Low);
        let cap = gpu.aimd.fraction();
        if add(&lp, cand.throughput()).iter().any(|x| *x > cap) {
            return Ok(true);
        }
    }
    for entry in &gpu.running {
        if !entry.priority().at_least(cand.priority()) {
            continue;
        }
        let id = entry.batch.batch_id;
        let others = gpu.aggregate_where(|e| e.batch.batch_id != id);
        let with = add(&others, cand.throughput());
        let intf_with = predictor.predict_intf(&with, entry.self_cmp, entry.self_mem, entry.priority())?;
        if projected_completion(entry, predictor, now, intf_with)? <= entry.deadline_abs {
            continue;
        }
        let intf_without = predictor.predict_intf(&others, entry.self_cmp, entry.self_mem, entry.priority())?;
        if projected_completion(entry, predictor, now, intf_without)? <= entry.deadline_abs {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Estimates the candidate's latency on `gpu` assuming it sees `fraction` of
/// the GPU's current aggregate throughput, and whether that meets the front
/// request's deadline.
pub fn check_meet(
    gpu: &GpuRuntimeState,
    cand: &Candidate<'_>,
    predictor: &Predictor,
    now: Millis,
    fraction: f64,
) -> Result<(bool, LatencyEstimate, Vec<f64>), SchedulerError> {
    let assumed: Vec<f64> = gpu.aggregate_throughput.iter().map(|x| x * fraction).collect();
    let est = predictor.estimate_latency(cand.profile, cand.size, cand.front_enqueue, &gpu.pcie, now, &assumed)?;
    let ok = cand.front_enqueue + est.total <= cand.deadline_abs;
    Ok((ok, est, assumed))
}

/// Largest `k` in `1..=max_k` with `feasible(k)` returning `Some`, assuming
/// feasibility is monotone (feasible at `k` implies feasible below `k`).
pub fn largest_feasible<T>(max_k: usize, mut feasible: impl FnMut(usize) -> Option<T>) -> Option<(usize, T)> {
    let (mut lo, mut hi) = (1usize, max_k);
    let mut best = None;
    while lo <= hi {
        let mid = lo + (hi - lo) / 2;
        match feasible(mid) {
            Some(v) => {
                best = Some((mid, v));
                lo = mid + 1;
            }
            None => hi = mid - 1,
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDecision {
    pub time: Millis,
    pub batch_id: u64,
    pub model: usize,
    pub priority: PriorityLevel,
    pub size: usize,
    pub gpu: usize,
    pub estimated_latency: Millis,
    pub intf_pred: f64,
    pub assumed_m_avg: Vec<f64>,
    pub front_enqueue: Millis,
    pub deadline_abs: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    InterferenceAware,
    Temporal,
    StaticSpatial,
    ReactiveSpatial,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::InterferenceAware,
        PolicyKind::Temporal,
        PolicyKind::StaticSpatial,
        PolicyKind::ReactiveSpatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::InterferenceAware => "interference-aware",
            PolicyKind::Temporal => "temporal",
            PolicyKind::StaticSpatial => "static-spatial",
            PolicyKind::ReactiveSpatial => "reactive-spatial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Switches that remove one prioritization mechanism of the
/// interference-aware policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Scan queues oldest-front-first regardless of priority.
    pub no_priority_scan: bool,
    /// Ground truth gives high priority no interference advantage.
    pub no_gamma_advantage: bool,
    /// Skip the own-deadline feasibility check.
    pub no_meet: bool,
    /// Skip the running-batch deadline check and the low-priority cap.
    pub no_violate: bool,
}

impl Ablation {
    pub fn variants() -> Vec<(&'static str, Ablation)> {
        let full = Ablation::default();
        vec![
            ("full", full),
            (
                "no-priority-scan",
                Ablation {
                    no_priority_scan: true,
                    ..full
                },
            ),
            (
                "no-gamma-advantage",
                Ablation {
                    no_gamma_advantage: true,
                    ..full
                },
            ),
            ("no-meet", Ablation { no_meet: true, ..full }),
            (
                "no-violate",
                Ablation {
                    no_violate: true,
                    ..full
                },
            ),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub concurrency_limit: usize,
    /// Share of the GPU's current aggregate throughput a candidate is assumed
    /// to see when checking its own deadline.
    pub meet_fraction: f64,
    pub aimd: AimdConfig,
    /// Early-dropped high-priority requests count as deadline violations for
    /// the AIMD cap and the reactive allowance.
    pub drops_count_as_violation: bool,
    /// Concurrency cap of the static spatial baseline.
    pub static_cap: usize,
    pub reactive: ReactiveConfig,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            concurrency_limit: 4,
            meet_fraction: 0.5,
            aimd: AimdConfig::default(),
            drops_count_as_violation: true,
            static_cap: 3,
            reactive: ReactiveConfig::default(),
        }
    }
}

/// What one scheduling pass did.
#[derive(Debug, Clone, Default)]
pub struct PassOutcome {
    pub dispatched: Vec<(ScheduleDecision, Batch)>,
    pub dropped: Vec<Request>,
    /// `(gpu, c_low)` after every cap change made during the pass.
    pub cap_changes: Vec<(usize, f64)>,
}

/// Result of a completed batch.
#[derive(Debug, Clone)]
pub struct Completion {
    pub batch: Batch,
    pub sample: FeedbackSample,
    pub update: UpdateOutcome,
    pub measured_kernel: Millis,
    pub t_kernel_isol: Millis,
    /// Front request's deadline was missed.
    pub missed: bool,
    pub cap_changes: Vec<(usize, f64)>,
}

/// Per-node scheduling context: queues, per-GPU runtime views, the shared
/// predictor and the policy state.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub profiles: ProfileSet,
    pub policy: PolicyKind,
    pub ablation: Ablation,
    pub config: SchedulerConfig,
    pub queues: Vec<TaskQueue>,
    pub gpus: Vec<GpuRuntimeState>,
    pub predictor: Predictor,
    pub reactive: ReactiveState,
    next_batch_id: u64,
}

/// A GPU chosen for a batch size, with the estimate that justified it.
#[derive(Debug, Clone)]
pub(crate) struct Placement {
    pub gpu: usize,
    pub estimate: LatencyEstimate,
    pub assumed: Vec<f64>,
}

impl Scheduler {
    pub fn new(
        profiles: ProfileSet,
        num_gpus: usize,
        policy: PolicyKind,
        ablation: Ablation,
        config: SchedulerConfig,
        predictor: Predictor,
    ) -> Self {
        let width = profiles.metric_count();
        let limit = match policy {
            PolicyKind::Temporal => 1,
            PolicyKind::StaticSpatial => config.static_cap,
            PolicyKind::ReactiveSpatial => config.reactive.global_limit,
            PolicyKind::InterferenceAware => config.concurrency_limit,
        };
        let gpus = (0..num_gpus)
            .map(|g| GpuRuntimeState::new(g, width, limit, AimdState::new(config.aimd, 0.0)))
            .collect();
        let queues = profiles.iter().enumerate().map(|(i, p)| TaskQueue::new(i, p)).collect();
        Self {
            reactive: ReactiveState::new(config.reactive, 0.0),
            profiles,
            policy,
            ablation,
            config,
            queues,
            gpus,
            predictor,
            next_batch_id: 0,
        }
    }

    pub fn enqueue(&mut self, r: Request) {
        self.queues[r.model].push(r);
    }

    /// Queue scan order for a pass.
    pub fn scan_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.queues.len()).filter(|&q| !self.queues[q].is_empty()).collect();
        let by_priority = !(self.policy == PolicyKind::InterferenceAware && self.ablation.no_priority_scan);
        order.sort_by(|&a, &b| {
            let (qa, qb) = (&self.queues[a], &self.queues[b]);
            let prio = if by_priority {
                qa.priority.cmp(&qb.priority)
            } else {
                std::cmp::Ordering::Equal
            };
            prio.then(qa.front_enqueue().unwrap_or(f64::INFINITY).total_cmp(&qb.front_enqueue().unwrap_or(f64::INFINITY)))
                .then(a.cmp(&b))
        });
        order
    }

    /// One scheduling pass over every non-empty queue.
    pub fn pass(&mut self, now: Millis) -> Result<PassOutcome, SchedulerError> {
        let mut out = PassOutcome::default();
        for q in self.scan_order() {
            let dropped = early_drop(&mut self.queues[q], now, self.profiles.get(q));
            if !dropped.is_empty() && self.queues[q].priority == PriorityLevel::High && self.config.drops_count_as_violation
            {
                self.hp_violation(None, &mut out.cap_changes);
            }
            out.dropped.extend(dropped);
            while self.queues[q].is_ready(now) && !self.queues[q].is_empty() {
                let Some((size, placement)) = self.pick(q, now)? else {
                    break;
                };
                out.dispatched.push(self.dispatch(q, size, placement, now)?);
            }
        }
        Ok(out)
    }

    fn candidate(&self, q: usize, size: usize) -> Candidate<'_> {
        let queue = &self.queues[q];
        let front = queue.pending.front().expect("non-empty queue");
        Candidate {
            profile: self.profiles.get(q),
            size,
            front_enqueue: front.arrival_time,
            deadline_abs: front.deadline_abs,
        }
    }

    fn pick(&self, q: usize, now: Millis) -> Result<Option<(usize, Placement)>, SchedulerError> {
        let max_k = self.queues[q].len().min(self.profiles.get(q).max_batch_size);
        match self.policy {
            PolicyKind::InterferenceAware => self.pick_interference_aware(q, max_k, now),
            PolicyKind::Temporal => baselines::temporal_pick(self, &self.candidate(q, max_k), now),
            PolicyKind::StaticSpatial => baselines::static_spatial_pick(self, &self.candidate(q, max_k), now),
            PolicyKind::ReactiveSpatial => baselines::reactive_spatial_pick(self, &self.candidate(q, max_k), now),
        }
    }

    /// Feasible GPU with the lowest estimated latency for `cand`, if any.
    pub(crate) fn best_gpu(&self, cand: &Candidate<'_>, now: Millis) -> Result<Option<Placement>, SchedulerError> {
        let mut best: Option<Placement> = None;
        for gpu in &self.gpus {
            if !gpu.has_free_slot() {
                continue;
            }
            if !self.ablation.no_violate && check_violate(gpu, cand, &self.predictor, now)? {
                continue;
            }
            let (ok, estimate, assumed) = check_meet(gpu, cand, &self.predictor, now, self.config.meet_fraction)?;
            if !ok && !self.ablation.no_meet {
                continue;
            }
            if best.as_ref().is_none_or(|b| estimate.total < b.estimate.total) {
                best = Some(Placement {
                    gpu: gpu.gpu_id,
                    estimate,
                    assumed,
                });
            }
        }
        Ok(best)
    }

    fn pick_interference_aware(
        &self,
        q: usize,
        max_k: usize,
        now: Millis,
    ) -> Result<Option<(usize, Placement)>, SchedulerError> {
        let mut err = None;
        let found = largest_feasible(max_k, |k| match self.best_gpu(&self.candidate(q, k), now) {
            Ok(p) => p,
            Err(e) => {
                err.get_or_insert(e);
                None
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(found),
        }
    }

    fn dispatch(
        &mut self,
        q: usize,
        size: usize,
        placement: Placement,
        now: Millis,
    ) -> Result<(ScheduleDecision, Batch), SchedulerError> {
        let profile = self.profiles.get(q);
        let requests = self.queues[q].take_front(size);
        let batch_id = self.next_batch_id;
        self.next_batch_id += 1;
        let front = requests[0].clone();
        let gpu = &mut self.gpus[placement.gpu];
        let slot = gpu.pcie.reserve(now, profile.htod(size))?;
        let batch = Batch {
            batch_id,
            model: q,
            priority: profile.priority,
            front_enqueue_time: front.arrival_time,
            requests,
            gpu_id: placement.gpu,
            sched_time: now,
            transfer_start: Some(slot.start),
            kernel_start: None,
            completion_time: None,
        };
        let decision = ScheduleDecision {
            time: now,
            batch_id,
            model: q,
            priority: profile.priority,
            size,
            gpu: placement.gpu,
            estimated_latency: placement.estimate.total,
            intf_pred: placement.estimate.intf,
            assumed_m_avg: placement.assumed,
            front_enqueue: front.arrival_time,
            deadline_abs: front.deadline_abs,
        };
        gpu.running.push(RunningTaskEntry {
            batch: batch.clone(),
            intf_predicted: placement.estimate.intf,
            timeline: ThroughputTimeline::new(),
            kernel_start_estimate: slot.end,
            deadline_abs: front.deadline_abs,
            throughput: profile.throughput(size).to_vec(),
            self_cmp: profile.self_cmp(size),
            self_mem: profile.self_mem(size),
            t_kernel_isol: profile.kernel(size),
            t_residual: profile.residual(size),
        });
        gpu.recompute_aggregate();
        Ok((decision, batch))
    }

    /// Upload of `batch_id` finished at `now`: calibrate the link, start the
    /// kernel and add a co-location sample to every other running kernel.
    pub fn on_transfer_complete(&mut self, gpu_id: usize, batch_id: u64, now: Millis) -> Result<(), SchedulerError> {
        let gpu = &mut self.gpus[gpu_id];
        gpu.pcie.calibrate(now)?;
        let agg = gpu.kernel_aggregate_excluding(batch_id);
        let entry = gpu
            .entry_mut(batch_id)
            .ok_or(SchedulerError::UnknownEntry { gpu: gpu_id, batch: batch_id })?;
        entry.batch.kernel_start = Some(now);
        entry.timeline = ThroughputTimeline::starting_at(now, agg);
        self.resample_colocation(gpu_id, batch_id, now)
    }

    fn resample_colocation(&mut self, gpu_id: usize, skip: u64, now: Millis) -> Result<(), SchedulerError> {
        let gpu = &self.gpus[gpu_id];
        let width = gpu.metric_count();
        let updates: Vec<(usize, Vec<f64>)> = gpu
            .running
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kernel_running() && e.batch.batch_id != skip)
            .map(|(i, e)| {
                let id = e.batch.batch_id;
                let agg = sum_throughput(
                    width,
                    gpu.running
                        .iter()
                        .filter(|o| o.kernel_running() && o.batch.batch_id != id)
                        .map(|o| o.throughput.as_slice()),
                );
                (i, agg)
            })
            .collect();
        let gpu = &mut self.gpus[gpu_id];
        for (i, agg) in updates {
            gpu.running[i].record_colocation_change(now, agg)?;
        }
        Ok(())
    }

    /// Kernel of `batch_id` finished at `now` after `measured_kernel` ms.
    /// Removes it, resamples co-location, feeds the predictor and applies the
    /// deadline outcome to the policy state.
    pub fn on_batch_complete(
        &mut self,
        gpu_id: usize,
        batch_id: u64,
        measured_kernel: Millis,
        now: Millis,
    ) -> Result<Completion, SchedulerError> {
        let gpu = &mut self.gpus[gpu_id];
        let idx = gpu
            .running
            .iter()
            .position(|e| e.batch.batch_id == batch_id)
            .ok_or(SchedulerError::UnknownEntry { gpu: gpu_id, batch: batch_id })?;
        let entry = gpu.running.remove(idx);
        gpu.recompute_aggregate();
        self.resample_colocation(gpu_id, batch_id, now)?;

        let m_avg = if entry.timeline.is_empty() {
            vec![0.0; self.profiles.metric_count()]
        } else {
            entry.timeline.time_weighted_average(now)?
        };
        let sample = FeedbackSample {
            batch_id,
            m_avg_twa: m_avg,
            m_self_cmp: entry.self_cmp,
            m_self_mem: entry.self_mem,
            priority: entry.priority(),
            intf_predicted: entry.intf_predicted,
            intf_actual: measured_kernel / entry.t_kernel_isol,
        };
        let update = self.predictor.update(&sample)?;

        let mut batch = entry.batch;
        let done = now + entry.t_residual;
        batch.completion_time = Some(done);
        let missed = done > entry.deadline_abs;
        let mut cap_changes = Vec::new();
        if missed && batch.priority == PriorityLevel::High {
            self.hp_violation(Some(gpu_id), &mut cap_changes);
        }
        Ok(Completion {
            batch,
            sample,
            update,
            measured_kernel,
            t_kernel_isol: entry.t_kernel_isol,
            missed,
            cap_changes,
        })
    }

    /// Applies a high-priority deadline violation to the policy state. `None`
    /// means the violation is not tied to one GPU (an early drop).
    fn hp_violation(&mut self, gpu: Option<usize>, changes: &mut Vec<(usize, f64)>) {
        match self.policy {
            PolicyKind::InterferenceAware if !self.ablation.no_violate => {
                let targets: Vec<usize> = match gpu {
                    Some(g) => vec![g],
                    None => (0..self.gpus.len()).collect(),
                };
                for g in targets {
                    if self.gpus[g].aimd.reset_on_hp_violation() {
                        changes.push((g, self.gpus[g].aimd.c_low));
                    }
                }
            }
            PolicyKind::ReactiveSpatial => self.reactive.on_hp_violation(),
            _ => {}
        }
    }

    /// Periodic policy maintenance. Returns cap changes.
    pub fn on_tick(&mut self, now: Millis) -> Vec<(usize, f64)> {
        let mut changes = Vec::new();
        match self.policy {
            PolicyKind::InterferenceAware => {
                for gpu in &mut self.gpus {
                    if gpu.aimd.tick(now) {
                        changes.push((gpu.gpu_id, gpu.aimd.c_low));
                    }
                }
            }
            PolicyKind::ReactiveSpatial => self.reactive.tick(now),
            _ => {}
        }
        changes
    }

    pub fn queued(&self) -> usize {
        self.queues.iter().map(TaskQueue::len).sum()
    }

    pub fn running(&self) -> usize {
        self.gpus.iter().map(|g| g.running.len()).sum()
    }

    /// Drains every queue, e.g. at the end of a run.
    pub fn drain_queues(&mut self) -> Vec<Request> {
        let mut out = Vec::new();
        for q in &mut self.queues {
            out.extend(q.pending.drain(..));
            q.refresh_timeout();
        }
        out
    }
}
