//! Shared domain types: priorities, model profiles, requests, batches and the
//! per-GPU runtime view the scheduler and the predictor both read.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcie::PcieLinkState;
use crate::scheduler::AimdState;

/// Simulation time and durations, in milliseconds.
pub type Millis = f64;

/// Default co-location metric names: memory hierarchy then compute pipes.
pub const DEFAULT_METRICS: [&str; 5] = ["l1_cache", "l2_cache", "dram", "tensor_pipe", "fma_pipe"];

/// Two task classes. `High` sorts before `Low`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorityLevel {
    High,
    Low,
}

impl PriorityLevel {
    pub const ALL: [PriorityLevel; 2] = [PriorityLevel::High, PriorityLevel::Low];

    /// True when `self` is at least as important as `other`.
    pub fn at_least(self, other: PriorityLevel) -> bool {
        self <= other
    }

    pub fn index(self) -> usize {
        match self {
            PriorityLevel::High => 0,
            PriorityLevel::Low => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PriorityLevel::High => "high",
            PriorityLevel::Low => "low",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "high" | "hp" | "High" => Some(PriorityLevel::High),
            "low" | "lp" | "Low" => Some(PriorityLevel::Low),
            _ => None,
        }
    }
}

impl fmt::Display for PriorityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Offline measurements for one model. Every per-batch vector is indexed by
/// `batch_size - 1`; use the accessor methods, which take the batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub model_id: String,
    pub priority: PriorityLevel,
    /// Relative deadline (ms).
    pub deadline: Millis,
    pub batch_timeout: Millis,
    pub max_batch_size: usize,
    /// p95 isolated end-to-end inference latency.
    pub t_inf_isol: Vec<Millis>,
    /// p95 isolated host-to-device transfer latency.
    pub t_htod_isol: Vec<Millis>,
    /// p95 isolated kernel-execution latency.
    pub t_kernel_isol: Vec<Millis>,
    /// Time-weighted average throughput per co-location metric, as a fraction of peak.
    pub m_metric: Vec<Vec<f64>>,
    pub m_self_cmp: Vec<f64>,
    pub m_self_mem: Vec<f64>,
}

impl ModelProfile {
    fn at<T: Copy>(v: &[T], size: usize) -> T {
        v[size - 1]
    }

    pub fn inf(&self, size: usize) -> Millis {
        Self::at(&self.t_inf_isol, size)
    }

    pub fn htod(&self, size: usize) -> Millis {
        Self::at(&self.t_htod_isol, size)
    }

    pub fn kernel(&self, size: usize) -> Millis {
        Self::at(&self.t_kernel_isol, size)
    }

    /// Everything in the isolated latency that is neither upload nor kernel
    /// execution (download, host-side work).
    pub fn residual(&self, size: usize) -> Millis {
        (self.inf(size) - self.htod(size) - self.kernel(size)).max(0.0)
    }

    pub fn throughput(&self, size: usize) -> &[f64] {
        &self.m_metric[size - 1]
    }

    pub fn self_cmp(&self, size: usize) -> f64 {
        Self::at(&self.m_self_cmp, size)
    }

    pub fn self_mem(&self, size: usize) -> f64 {
        Self::at(&self.m_self_mem, size)
    }

    pub fn has_size(&self, size: usize) -> bool {
        size >= 1 && size <= self.max_batch_size && size <= self.t_inf_isol.len()
    }

    pub fn metric_count(&self) -> usize {
        self.m_metric.first().map_or(0, Vec::len)
    }
}

/// One broken profile rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    /// Batch size the rule failed at, if per-size.
    pub index: Option<usize>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(j) => write!(f, "{}: {} at j={}", self.field, self.rule, j),
            None => write!(f, "{}: {}", self.field, self.rule),
        }
    }
}

/// Checks every profile invariant and reports all violations at once.
pub fn validate_profile(p: &ModelProfile) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |field, index, rule: &str| {
        out.push(Violation {
            field,
            index,
            rule: rule.to_string(),
        })
    };

    if p.model_id.is_empty() {
        push("model_id", None, "empty identifier");
    }
    if p.max_batch_size == 0 {
        push("max_batch_size", None, "must be positive");
    }
    if !(p.batch_timeout >= 0.0 && p.batch_timeout.is_finite()) {
        push("batch_timeout", None, "must be a non-negative duration");
    }
    let n = p.max_batch_size;
    let lens: [(&'static str, usize); 6] = [
        ("t_inf_isol", p.t_inf_isol.len()),
        ("t_htod_isol", p.t_htod_isol.len()),
        ("t_kernel_isol", p.t_kernel_isol.len()),
        ("m_metric", p.m_metric.len()),
        ("m_self_cmp", p.m_self_cmp.len()),
        ("m_self_mem", p.m_self_mem.len()),
    ];
    let mut lengths_ok = true;
    for (field, len) in lens {
        if len != n {
            lengths_ok = false;
            push(field, None, &format!("expected {n} entries, found {len}"));
        }
    }
    if !lengths_ok || n == 0 {
        return Err(out);
    }

    let width = p.m_metric[0].len();
    for j in 1..=n {
        for (field, v) in [
            ("t_inf_isol", p.inf(j)),
            ("t_htod_isol", p.htod(j)),
            ("t_kernel_isol", p.kernel(j)),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                push(field, Some(j), "latency must be strictly positive");
            }
        }
        if j > 1 {
            for (field, v) in [
                ("t_inf_isol", &p.t_inf_isol),
                ("t_htod_isol", &p.t_htod_isol),
                ("t_kernel_isol", &p.t_kernel_isol),
            ] {
                if v[j - 1] < v[j - 2] {
                    push(field, Some(j), "latency non-monotone");
                }
            }
        }
        if p.inf(j) < p.htod(j) + p.kernel(j) {
            push("t_inf_isol", Some(j), "shorter than upload plus kernel latency");
        }
        let row = &p.m_metric[j - 1];
        if row.len() != width || width == 0 {
            push("m_metric", Some(j), "inconsistent metric count");
        }
        if row.iter().any(|x| !(0.0..=1.0).contains(x)) {
            push("m_metric", Some(j), "throughput out of [0,1]");
        }
        if !(0.0..=1.0).contains(&p.self_cmp(j)) {
            push("m_self_cmp", Some(j), "throughput out of [0,1]");
        }
        if !(0.0..=1.0).contains(&p.self_mem(j)) {
            push("m_self_mem", Some(j), "throughput out of [0,1]");
        }
    }
    if !(p.deadline > p.inf(1)) {
        push("deadline", None, "not longer than t_inf_isol at j=1");
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    /// Index into the run's profile set.
    pub model: usize,
    pub arrival_time: Millis,
    pub deadline_abs: Millis,
}

impl Request {
    pub fn new(request_id: u64, model: usize, arrival_time: Millis, deadline: Millis) -> Self {
        Self {
            request_id,
            model,
            arrival_time,
            deadline_abs: arrival_time + deadline,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_id: u64,
    pub model: usize,
    pub priority: PriorityLevel,
    pub front_enqueue_time: Millis,
    pub requests: Vec<Request>,
    pub gpu_id: usize,
    pub sched_time: Millis,
    pub transfer_start: Option<Millis>,
    pub kernel_start: Option<Millis>,
    pub completion_time: Option<Millis>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.requests.len()
    }

    /// Deadline of the front (oldest) request, the strictest in the batch.
    pub fn binding_deadline(&self) -> Millis {
        self.requests
            .iter()
            .map(|r| r.deadline_abs)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimelineError {
    #[error("no samples")]
    Empty,
    #[error("sample at {at} precedes the last sample at {last}")]
    TimeRegression { at: String, last: String },
}

/// Step-hold signal of per-metric throughput: each value holds until the next sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThroughputTimeline {
    samples: Vec<(Millis, Vec<f64>)>,
}

impl ThroughputTimeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(t: Millis, value: Vec<f64>) -> Self {
        Self {
            samples: vec![(t, value)],
        }
    }

    pub fn samples(&self) -> &[(Millis, Vec<f64>)] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends a sample. A sample at the same instant as the last one replaces it.
    pub fn record(&mut self, t: Millis, value: Vec<f64>) -> Result<(), TimelineError> {
        match self.samples.last_mut() {
            Some((last, _)) if t < *last => Err(TimelineError::TimeRegression {
                at: t.to_string(),
                last: last.to_string(),
            }),
            Some((last, v)) if t == *last => {
                *v = value;
                Ok(())
            }
            _ => {
                self.samples.push((t, value));
                Ok(())
            }
        }
    }

    /// Σ v_i·d_i / Σ d_i per metric, the last sample holding until `end_time`.
    /// A zero-length window returns the last sample.
    pub fn time_weighted_average(&self, end_time: Millis) -> Result<Vec<f64>, TimelineError> {
        let (last_t, last_v) = self.samples.last().ok_or(TimelineError::Empty)?;
        if end_time < *last_t {
            return Err(TimelineError::TimeRegression {
                at: end_time.to_string(),
                last: last_t.to_string(),
            });
        }
        let total = end_time - self.samples[0].0;
        if total <= 0.0 {
            return Ok(last_v.clone());
        }
        let mut acc = vec![0.0; last_v.len()];
        for (i, (t, v)) in self.samples.iter().enumerate() {
            let next = self.samples.get(i + 1).map_or(end_time, |s| s.0);
            let d = next - t;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x * d;
            }
        }
        for a in &mut acc {
            *a /= total;
        }
        Ok(acc)
    }
}

/// Free-function form of [`ThroughputTimeline::time_weighted_average`].
pub fn time_weighted_average(
    timeline: &ThroughputTimeline,
    end_time: Millis,
) -> Result<Vec<f64>, TimelineError> {
    timeline.time_weighted_average(end_time)
}

/// Scheduler-side record of a batch dispatched to a GPU.
#[derive(Debug, Clone)]
pub struct RunningTaskEntry {
    pub batch: Batch,
    /// Interference degree predicted when the batch was scheduled.
    pub intf_predicted: f64,
    /// Aggregate throughput of the batches whose kernels overlap this one's,
    /// excluding itself. Starts when its own kernel starts.
    pub timeline: ThroughputTimeline,
    pub kernel_start_estimate: Millis,
    pub deadline_abs: Millis,
    pub throughput: Vec<f64>,
    pub self_cmp: f64,
    pub self_mem: f64,
    pub t_kernel_isol: Millis,
    pub t_residual: Millis,
}

impl RunningTaskEntry {
    pub fn kernel_running(&self) -> bool {
        self.batch.kernel_start.is_some()
    }

    pub fn priority(&self) -> PriorityLevel {
        self.batch.priority
    }

    /// Appends the co-location sample taken when a neighbour starts or finishes.
    pub fn record_colocation_change(
        &mut self,
        now: Millis,
        new_aggregate: Vec<f64>,
    ) -> Result<(), TimelineError> {
        self.timeline.record(now, new_aggregate)
    }
}

#[derive(Debug, Clone)]
pub struct GpuRuntimeState {
    pub gpu_id: usize,
    pub running: Vec<RunningTaskEntry>,
    pub concurrency_limit: usize,
    pub pcie: PcieLinkState,
    pub aimd: AimdState,
    /// Sum of the profiled throughput of every running batch.
    pub aggregate_throughput: Vec<f64>,
}

impl GpuRuntimeState {
    pub fn new(gpu_id: usize, metric_count: usize, concurrency_limit: usize, aimd: AimdState) -> Self {
        Self {
            gpu_id,
            running: Vec::new(),
            concurrency_limit,
            pcie: PcieLinkState::default(),
            aimd,
            aggregate_throughput: vec![0.0; metric_count],
        }
    }

    pub fn has_free_slot(&self) -> bool {
        self.running.len() < self.concurrency_limit
    }

    pub fn metric_count(&self) -> usize {
        self.aggregate_throughput.len()
    }

    pub fn recompute_aggregate(&mut self) {
        self.aggregate_throughput = sum_throughput(self.metric_count(), self.running.iter().map(|e| e.throughput.as_slice()));
    }

    /// Aggregate over running batches that pass `keep`.
    pub fn aggregate_where(&self, keep: impl Fn(&RunningTaskEntry) -> bool) -> Vec<f64> {
        sum_throughput(
            self.metric_count(),
            self.running.iter().filter(|e| keep(e)).map(|e| e.throughput.as_slice()),
        )
    }

    /// Aggregate of batches currently executing kernels, except `batch_id`.
    pub fn kernel_aggregate_excluding(&self, batch_id: u64) -> Vec<f64> {
        self.aggregate_where(|e| e.kernel_running() && e.batch.batch_id != batch_id)
    }

    pub fn entry(&self, batch_id: u64) -> Option<&RunningTaskEntry> {
        self.running.iter().find(|e| e.batch.batch_id == batch_id)
    }

    pub fn entry_mut(&mut self, batch_id: u64) -> Option<&mut RunningTaskEntry> {
        self.running.iter_mut().find(|e| e.batch.batch_id == batch_id)
    }

    pub fn count_priority(&self, p: PriorityLevel) -> usize {
        self.running.iter().filter(|e| e.priority() == p).count()
    }
}

pub fn sum_throughput<'a>(width: usize, rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for row in rows {
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{builtin_profiles, synthesize, synthetic_model_strategy};
    use proptest::prelude::*;

    fn tl(samples: &[(f64, f64)]) -> ThroughputTimeline {
        let mut t = ThroughputTimeline::new();
        for &(at, v) in samples {
            t.record(at, vec![v]).unwrap();
        }
        t
    }

    #[test]
    fn twa_constant_signal() {
        assert_eq!(tl(&[(0.0, 0.4)]).time_weighted_average(10.0).unwrap(), vec![0.4]);
    }

    #[test]
    fn twa_two_steps() {
        let v = tl(&[(0.0, 0.2), (5.0, 0.8)]).time_weighted_average(10.0).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn twa_three_steps() {
        let v = tl(&[(0.0, 0.6), (2.0, 0.0), (8.0, 0.6)])
            .time_weighted_average(10.0)
            .unwrap();
        assert!((v[0] - 0.24).abs() < 1e-15);
    }

    #[test]
    fn twa_empty_is_error() {
        assert_eq!(
            ThroughputTimeline::new().time_weighted_average(1.0),
            Err(TimelineError::Empty)
        );
    }

    #[test]
    fn same_instant_replaces() {
        let t = tl(&[(2.0, 0.1), (2.0, 0.7)]);
        assert_eq!(t.samples().len(), 1);
        assert_eq!(t.samples()[0].1, vec![0.7]);
    }

    #[test]
    fn regression_rejected() {
        let mut t = tl(&[(6.0, 0.1)]);
        assert!(t.record(2.0, vec![0.0]).is_err());
    }

    #[test]
    fn priority_order() {
        let mut v = vec![PriorityLevel::Low, PriorityLevel::High, PriorityLevel::Low];
        v.sort();
        assert_eq!(v[0], PriorityLevel::High);
        assert!(PriorityLevel::High.at_least(PriorityLevel::Low));
        assert!(!PriorityLevel::Low.at_least(PriorityLevel::High));
    }

    #[test]
    fn builtin_profiles_validate() {
        for p in builtin_profiles() {
            assert_eq!(validate_profile(&p), Ok(()), "{}", p.model_id);
        }
    }

    #[test]
    fn non_monotone_latency_reported() {
        let mut p = builtin_profiles().remove(0);
        p.t_inf_isol[1] = p.t_inf_isol[0] - 0.01;
        let errs = validate_profile(&p).unwrap_err();
        assert!(errs
            .iter()
            .any(|v| v.field == "t_inf_isol" && v.index == Some(2) && v.rule == "latency non-monotone"));
    }

    #[test]
    fn out_of_range_throughput_reported() {
        let mut p = builtin_profiles().remove(0);
        p.m_metric[0][2] = 1.2;
        let errs = validate_profile(&p).unwrap_err();
        assert!(errs
            .iter()
            .any(|v| v.field == "m_metric" && v.index == Some(1) && v.rule == "throughput out of [0,1]"));
    }

    #[test]
    fn unservable_deadline_reported() {
        let mut p = builtin_profiles().remove(0);
        p.deadline = p.t_inf_isol[0];
        assert!(validate_profile(&p).unwrap_err().iter().any(|v| v.field == "deadline"));
    }

    // Piecewise-constant integral by unit steps over integer sample times.
    fn unit_step_oracle(samples: &[(u32, f64)], end: u32) -> f64 {
        let mut sum = 0.0;
        for t in samples[0].0..end {
            let v = samples.iter().rev().find(|(at, _)| *at <= t).unwrap().1;
            sum += v;
        }
        sum / f64::from(end - samples[0].0)
    }

    fn timeline_strategy() -> impl Strategy<Value = (Vec<(u32, f64)>, u32)> {
        prop::collection::vec((1u32..20, 0.0f64..3.0), 1..100).prop_flat_map(|steps| {
            let mut t = 0;
            let samples: Vec<(u32, f64)> = steps
                .iter()
                .map(|&(gap, v)| {
                    let s = (t, v);
                    t += gap;
                    s
                })
                .collect();
            (Just(samples), t..t + 20)
        })
    }

    proptest! {
        #[test]
        fn twa_matches_step_integral((samples, tail) in timeline_strategy()) {
            let end = tail.max(samples.last().unwrap().0 + 1);
            let mut timeline = ThroughputTimeline::new();
            for (t, v) in &samples {
                timeline.record(f64::from(*t), vec![*v]).unwrap();
            }
            let got = timeline.time_weighted_average(f64::from(end)).unwrap()[0];
            let want = unit_step_oracle(&samples, end);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300) || (got - want).abs() < 1e-14);
            let lo = samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
            let hi = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }

        #[test]
        fn twa_invariant_under_interval_split((samples, tail) in timeline_strategy(), pick in any::<prop::sample::Index>(), frac in 0.01f64..0.99) {
            let end = f64::from(tail.max(samples.last().unwrap().0 + 1));
            let mut whole = ThroughputTimeline::new();
            let mut split = ThroughputTimeline::new();
            let i = pick.index(samples.len());
            for (k, (t, v)) in samples.iter().enumerate() {
                let t = f64::from(*t);
                whole.record(t, vec![*v]).unwrap();
                split.record(t, vec![*v]).unwrap();
                if k == i {
                    let next = samples.get(k + 1).map_or(end, |s| f64::from(s.0));
                    split.record(t + (next - t) * frac, vec![*v]).unwrap();
                }
            }
            let a = whole.time_weighted_average(end).unwrap()[0];
            let b = split.time_weighted_average(end).unwrap()[0];
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn generated_profiles_validate(model in synthetic_model_strategy()) {
            let p = synthesize(&model);
            prop_assert_eq!(validate_profile(&p), Ok(()));
        }
    }
}
