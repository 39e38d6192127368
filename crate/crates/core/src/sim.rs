//! Deterministic discrete-event simulation of one multi-GPU node.
//!
//! Scheduled batches upload over a per-GPU FIFO link, then execute under a
//! progress-rate model: a kernel holds a fixed amount of isolated work that
//! drains at `1 / slowdown`, where the slowdown comes from the hidden oracle
//! and is recomputed whenever a kernel starts or ends on the same GPU.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::ground_truth::{ground_truth_slowdown, GroundTruthParams};
use crate::metrics::{compute_metrics, perturb_profiles, MetricsReport};
use crate::model::{Millis, PriorityLevel, Request};
use crate::predictor::{OptimizerState, Predictor, PredictorParams};
use crate::profile::ProfileSet;
use crate::scheduler::{PassOutcome, Scheduler, SchedulerError};
use crate::trace::{EventTrace, TraceKind, TraceRecord};
use crate::workload::{self, sub_seed, WorkloadError};

const NOISE_SALT: u64 = 0x6e6f_6973_65;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("batch {batch} has negative remaining work {remaining}")]
    NegativeWork { batch: u64, remaining: f64 },
    #[error("batch {0} is not executing")]
    UnknownBatch(u64),
}

/// Event payloads. The derive order is the tie-break rank at equal times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    KernelComplete { gpu: usize, batch: u64, version: u64 },
    TransferComplete { gpu: usize, batch: u64 },
    RequestArrival { index: usize },
    BatchTimeout { model: usize },
    AimdTick,
    ParameterShift,
}

impl EventKind {
    pub fn rank(&self) -> u8 {
        match self {
            EventKind::KernelComplete { .. } => 0,
            EventKind::TransferComplete { .. } => 1,
            EventKind::RequestArrival { .. } => 2,
            EventKind::BatchTimeout { .. } => 3,
            EventKind::AimdTick => 4,
            EventKind::ParameterShift => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: Millis,
    pub kind: EventKind,
    pub seq: u64,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    // reversed: BinaryHeap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.rank().cmp(&self.kind.rank()))
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Time-ordered event queue; ties go by kind rank, then insertion order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<SimEvent>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: Millis, kind: EventKind) {
        self.heap.push(SimEvent { time, kind, seq: self.seq });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// A kernel executing on a simulated GPU.
#[derive(Debug, Clone)]
pub struct ExecutionState {
    pub batch_id: u64,
    pub priority: PriorityLevel,
    pub throughput: Vec<f64>,
    pub self_cmp: f64,
    pub self_mem: f64,
    pub t_kernel_isol: Millis,
    pub remaining_isolated_work: Millis,
    pub current_slowdown: f64,
    pub noise: f64,
    pub kernel_start: Millis,
    pub last_update: Millis,
    /// ∫ 1/slowdown dt so far.
    pub work_done: Millis,
    pub version: u64,
}

impl ExecutionState {
    /// Consumes isolated work up to `now` at the current slowdown.
    pub fn advance(&mut self, now: Millis) -> Result<(), SimError> {
        let consumed = (now - self.last_update) / self.current_slowdown;
        self.remaining_isolated_work -= consumed;
        self.work_done += consumed;
        self.last_update = now;
        if self.remaining_isolated_work < -1e-9 * self.t_kernel_isol {
            return Err(SimError::NegativeWork {
                batch: self.batch_id,
                remaining: self.remaining_isolated_work,
            });
        }
        Ok(())
    }

    pub fn completion_time(&self) -> Millis {
        self.last_update + self.remaining_isolated_work.max(0.0) * self.current_slowdown
    }
}

/// Ground-truth state of one GPU.
#[derive(Debug, Clone, Default)]
pub struct SimGpu {
    pub link_free: Millis,
    pub executing: Vec<ExecutionState>,
}

/// Advances every kernel on `gpu` to `now`, recomputes slowdowns from the
/// current co-located set and returns the new `(batch, completion, version)`
/// for each.
pub fn recompute_completions(
    gpu: &mut SimGpu,
    now: Millis,
    truth: &GroundTruthParams,
) -> Result<Vec<(u64, Millis, u64)>, SimError> {
    for e in &mut gpu.executing {
        e.advance(now)?;
    }
    let width = truth.w.len();
    let total = crate::model::sum_throughput(width, gpu.executing.iter().map(|e| e.throughput.as_slice()));
    let mut out = Vec::with_capacity(gpu.executing.len());
    for e in &mut gpu.executing {
        let others: Vec<f64> = total.iter().zip(&e.throughput).map(|(t, x)| (t - x).max(0.0)).collect();
        e.current_slowdown = ground_truth_slowdown(&others, e.self_cmp, e.self_mem, e.priority, e.noise, truth);
        e.version += 1;
        out.push((e.batch_id, e.completion_time(), e.version));
    }
    Ok(out)
}

#[derive(Debug)]
pub struct SimOutput {
    pub trace: EventTrace,
    pub report: MetricsReport,
    pub predictor: Predictor,
}

/// Predictor as described by the config.
pub fn build_predictor(cfg: &ExperimentConfig, metric_count: usize) -> Result<Predictor, SimError> {
    let pc = &cfg.predictor;
    let mut p = match &pc.checkpoint {
        Some(path) => Predictor::load(path).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        None => {
            let params = pc.initial.clone().unwrap_or_else(|| PredictorParams::initial(metric_count));
            let mut p = Predictor::new(params);
            p.optimizer = OptimizerState::new(p.params.len());
            p.optimizer.adam = pc.adam;
            p.optimizer.huber_delta = pc.huber_delta;
            p.effect_cap = pc.effect_cap;
            p
        }
    };
    p.frozen = pc.frozen;
    Ok(p)
}

pub struct Simulation {
    cfg: ExperimentConfig,
    truth_profiles: ProfileSet,
    truth: GroundTruthParams,
    requests: Vec<Request>,
    scheduler: Scheduler,
    gpus: Vec<SimGpu>,
    events: EventQueue,
    noise_rng: ChaCha8Rng,
    trace: EventTrace,
    timeout_at: Vec<Option<Millis>>,
    frozen: Option<Predictor>,
    est_latency: HashMap<u64, Millis>,
    now: Millis,
}

impl Simulation {
    /// Validates the config, generates the workload and sets up the node.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, SimError> {
        let profiles = cfg.profiles()?;
        cfg.validate(&profiles)?;
        let requests = workload::generate(&cfg.workload, &profiles, cfg.duration_ms, cfg.seed)?;
        Self::with_requests(cfg, profiles, requests)
    }

    /// Like [`Simulation::new`] with an explicit request list.
    pub fn with_requests(cfg: &ExperimentConfig, profiles: ProfileSet, requests: Vec<Request>) -> Result<Self, SimError> {
        cfg.validate(&profiles)?;
        let sched_profiles = match &cfg.profile_perturbation {
            Some(p) => ProfileSet::new(perturb_profiles(profiles.as_slice(), p.magnitude_percent, p.seed))
                .map_err(ConfigError::from)?,
            None => profiles.clone(),
        };
        let predictor = build_predictor(cfg, profiles.metric_count())?;
        let scheduler = Scheduler::new(sched_profiles, cfg.num_gpus, cfg.policy, cfg.ablation, cfg.scheduler, predictor);
        let truth = Self::effective_truth(cfg, &cfg.ground_truth);
        Ok(Self {
            truth_profiles: profiles,
            truth,
            requests,
            scheduler,
            gpus: vec![SimGpu::default(); cfg.num_gpus],
            events: EventQueue::default(),
            noise_rng: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, NOISE_SALT)),
            trace: EventTrace::default(),
            timeout_at: vec![None; cfg.workload.len().max(64)],
            frozen: None,
            est_latency: HashMap::new(),
            now: 0.0,
            cfg: cfg.clone(),
        })
    }

    fn effective_truth(cfg: &ExperimentConfig, p: &GroundTruthParams) -> GroundTruthParams {
        if cfg.ablation.no_gamma_advantage {
            p.without_priority_advantage()
        } else {
            p.clone()
        }
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn run(mut self) -> Result<SimOutput, SimError> {
        for (i, r) in self.requests.iter().enumerate() {
            self.events.push(r.arrival_time, EventKind::RequestArrival { index: i });
        }
        if !self.requests.is_empty() {
            self.events.push(self.cfg.tick_ms, EventKind::AimdTick);
        }
        if let Some(shift) = &self.cfg.ground_truth_shift {
            self.events.push(shift.at_ms, EventKind::ParameterShift);
        }
        self.timeout_at = vec![None; self.truth_profiles.len()];

        while let Some(ev) = self.events.pop() {
            self.now = ev.time;
            self.handle(ev)?;
            let out = self.scheduler.pass(self.now)?;
            self.apply_pass(out)?;
        }

        let end = self.now;
        for r in self.scheduler.drain_queues() {
            self.push_request(TraceKind::Drop, end, &r);
        }
        self.trace.push(TraceRecord::new(end, TraceKind::End));
        let report = compute_metrics(&self.trace, self.cfg.goodput_window_ms);
        Ok(SimOutput {
            trace: self.trace,
            report,
            predictor: self.scheduler.predictor,
        })
    }

    fn handle(&mut self, ev: SimEvent) -> Result<(), SimError> {
        match ev.kind {
            EventKind::RequestArrival { index } => {
                let r = self.requests[index].clone();
                self.push_request(TraceKind::Arrival, self.now, &r);
                self.scheduler.enqueue(r);
            }
            EventKind::BatchTimeout { model } => {
                if self.timeout_at[model] == Some(self.now) {
                    self.timeout_at[model] = None;
                }
            }
            EventKind::AimdTick => {
                let changes = self.scheduler.on_tick(self.now);
                self.push_cap_changes(&changes);
                let next = self.now + self.cfg.tick_ms;
                if next <= self.cfg.duration_ms + self.cfg.drain_ms {
                    self.events.push(next, EventKind::AimdTick);
                }
            }
            EventKind::ParameterShift => {
                let shift = self.cfg.ground_truth_shift.clone().expect("shift configured");
                self.truth = Self::effective_truth(&self.cfg, &shift.params);
                self.frozen = Some(self.scheduler.predictor.frozen_copy());
                self.trace.push(TraceRecord::new(self.now, TraceKind::Shift));
            }
            EventKind::TransferComplete { gpu, batch } => self.kernel_start(gpu, batch)?,
            EventKind::KernelComplete { gpu, batch, version } => {
                let current = self.gpus[gpu].executing.iter().find(|e| e.batch_id == batch).map(|e| e.version);
                if current == Some(version) {
                    self.kernel_complete(gpu, batch)?;
                }
            }
        }
        Ok(())
    }

    fn push_request(&mut self, kind: TraceKind, time: Millis, r: &Request) {
        let mut rec = TraceRecord::new(time, kind);
        rec.request = Some(r.request_id);
        rec.model = Some(r.model);
        rec.priority = Some(self.truth_profiles.get(r.model).priority);
        rec.deadline = Some(r.deadline_abs);
        self.trace.push(rec);
    }

    fn push_cap_changes(&mut self, changes: &[(usize, f64)]) {
        for &(gpu, c) in changes {
            let mut rec = TraceRecord::new(self.now, TraceKind::CapChange);
            rec.gpu = Some(gpu);
            rec.c_low = Some(c);
            self.trace.push(rec);
        }
    }

    fn apply_pass(&mut self, out: PassOutcome) -> Result<(), SimError> {
        for r in &out.dropped {
            self.push_request(TraceKind::Drop, self.now, r);
        }
        self.push_cap_changes(&out.cap_changes);
        for (d, batch) in out.dispatched {
            let profile = self.truth_profiles.get(d.model);
            let gpu = &mut self.gpus[d.gpu];
            let start = gpu.link_free.max(self.now);
            let end = start + profile.htod(d.size) * self.truth.htod_scale;
            gpu.link_free = end;
            self.events.push(end, EventKind::TransferComplete { gpu: d.gpu, batch: d.batch_id });
            let mut rec = TraceRecord::new(self.now, TraceKind::Dispatch);
            rec.gpu = Some(d.gpu);
            rec.batch = Some(d.batch_id);
            rec.model = Some(d.model);
            rec.priority = Some(d.priority);
            rec.size = Some(batch.size());
            rec.deadline = Some(d.deadline_abs);
            rec.transfer_start = Some(start);
            rec.est_latency = Some(d.estimated_latency);
            self.est_latency.insert(d.batch_id, d.estimated_latency);
            rec.intf_pred = Some(d.intf_pred);
            self.trace.push(rec);
        }
        for (q, queue) in self.scheduler.queues.iter().enumerate() {
            if let Some(t) = queue.timeout_deadline {
                if t > self.now && self.timeout_at[q] != Some(t) {
                    self.timeout_at[q] = Some(t);
                    self.events.push(t, EventKind::BatchTimeout { model: q });
                }
            }
        }
        Ok(())
    }

    fn reschedule(&mut self, gpu: usize, updates: Vec<(u64, Millis, u64)>) {
        for (batch, at, version) in updates {
            self.events.push(at, EventKind::KernelComplete { gpu, batch, version });
        }
    }

    fn kernel_start(&mut self, gpu_id: usize, batch_id: u64) -> Result<(), SimError> {
        let now = self.now;
        self.scheduler.on_transfer_complete(gpu_id, batch_id, now)?;
        let entry = self.scheduler.gpus[gpu_id]
            .entry(batch_id)
            .ok_or(SimError::UnknownBatch(batch_id))?;
        let (model, size) = (entry.batch.model, entry.batch.size());
        let transfer_start = entry.batch.transfer_start;
        let p = self.truth_profiles.get(model);
        let work = p.kernel(size);
        let exec = ExecutionState {
            batch_id,
            priority: p.priority,
            throughput: p.throughput(size).to_vec(),
            self_cmp: p.self_cmp(size),
            self_mem: p.self_mem(size),
            t_kernel_isol: work,
            remaining_isolated_work: work,
            current_slowdown: 1.0,
            noise: self.truth.draw_noise(&mut self.noise_rng),
            kernel_start: now,
            last_update: now,
            work_done: 0.0,
            version: 0,
        };
        let gpu = &mut self.gpus[gpu_id];
        gpu.executing.push(exec);
        let updates = recompute_completions(gpu, now, &self.truth)?;
        self.reschedule(gpu_id, updates);
        let mut rec = TraceRecord::new(now, TraceKind::KernelStart);
        rec.gpu = Some(gpu_id);
        rec.batch = Some(batch_id);
        rec.transfer_start = transfer_start;
        self.trace.push(rec);
        Ok(())
    }

    fn kernel_complete(&mut self, gpu_id: usize, batch_id: u64) -> Result<(), SimError> {
        let now = self.now;
        let gpu = &mut self.gpus[gpu_id];
        let idx = gpu
            .executing
            .iter()
            .position(|e| e.batch_id == batch_id)
            .ok_or(SimError::UnknownBatch(batch_id))?;
        gpu.executing[idx].advance(now)?;
        let exec = gpu.executing.remove(idx);
        let updates = recompute_completions(gpu, now, &self.truth)?;
        self.reschedule(gpu_id, updates);

        let measured = now - exec.kernel_start;
        let est = self.scheduler.gpus[gpu_id].entry(batch_id).map(|e| e.intf_predicted);
        let c = self.scheduler.on_batch_complete(gpu_id, batch_id, measured, now)?;
        let frozen = match &mut self.frozen {
            Some(f) => Some(f.update(&c.sample).map_err(SchedulerError::from)?.prediction),
            None => None,
        };
        self.push_cap_changes(&c.cap_changes);

        let batch = &c.batch;
        let p = self.truth_profiles.get(batch.model);
        let done = now + p.residual(batch.size());
        let est_latency = self.est_latency.remove(&batch_id);
        let mut rec = TraceRecord::new(now, TraceKind::KernelComplete);
        rec.gpu = Some(gpu_id);
        rec.batch = Some(batch_id);
        rec.model = Some(batch.model);
        rec.priority = Some(batch.priority);
        rec.size = Some(batch.size());
        rec.deadline = Some(batch.binding_deadline());
        rec.latency = Some(done - batch.front_enqueue_time);
        rec.est_latency = est_latency;
        rec.intf_pred = est;
        rec.intf_model = Some(c.update.prediction);
        rec.intf_frozen = frozen;
        rec.kernel_measured = Some(measured);
        rec.kernel_isol = Some(exec.t_kernel_isol);
        rec.work_integral = Some(exec.work_done);
        self.trace.push(rec);
        for r in &batch.requests {
            let mut rec = TraceRecord::new(done, TraceKind::Complete);
            rec.gpu = Some(gpu_id);
            rec.batch = Some(batch_id);
            rec.request = Some(r.request_id);
            rec.model = Some(r.model);
            rec.priority = Some(batch.priority);
            rec.deadline = Some(r.deadline_abs);
            rec.latency = Some(done - r.arrival_time);
            self.trace.push(rec);
        }
        Ok(())
    }
}

/// Runs `cfg` to completion.
pub fn run(cfg: &ExperimentConfig) -> Result<SimOutput, SimError> {
    Simulation::new(cfg)?.run()
}

/// Runs `cfg` with its seed replaced.
pub fn run_seeded(cfg: &ExperimentConfig, seed: u64) -> Result<SimOutput, SimError> {
    let mut c = cfg.clone();
    c.seed = seed;
    run(&c)
}
