//! Reference policies: temporal sharing, static spatial sharing and reactive
//! spatial sharing. They share queue scanning, batch formation and early
//! dropping with the interference-aware policy and differ only in placement.

use serde::{Deserialize, Serialize};

use crate::model::{GpuRuntimeState, Millis, PriorityLevel};
use crate::pcie::PcieLinkState;
use crate::predictor::LatencyEstimate;
use crate::scheduler::{Candidate, Placement, Scheduler, SchedulerError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReactiveConfig {
    pub default_allowance: usize,
    pub min_allowance: usize,
    pub global_limit: usize,
    /// Per-GPU cap on high-priority batches.
    pub hp_limit: usize,
    pub reset_period: Millis,
}

impl Default for ReactiveConfig {
    fn default() -> Self {
        Self {
            default_allowance: 3,
            min_allowance: 1,
            global_limit: 4,
            hp_limit: 3,
            reset_period: 200.0,
        }
    }
}

/// Low-priority concurrency allowance, shrunk by high-priority deadline
/// misses and restored on a fixed period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactiveState {
    pub lp_allowance: usize,
    pub config: ReactiveConfig,
    pub last_reset: Millis,
}

impl ReactiveState {
    pub fn new(config: ReactiveConfig, now: Millis) -> Self {
        Self {
            lp_allowance: config.default_allowance,
            config,
            last_reset: now,
        }
    }

    pub fn on_hp_violation(&mut self) {
        self.lp_allowance = self.lp_allowance.saturating_sub(1).max(self.config.min_allowance);
    }

    pub fn tick(&mut self, now: Millis) {
        let elapsed = now - self.last_reset;
        if elapsed + 1e-9 >= self.config.reset_period {
            let periods = ((elapsed + 1e-9) / self.config.reset_period).floor();
            self.last_reset += periods * self.config.reset_period;
            self.lp_allowance = self.config.default_allowance;
        }
    }

    /// Whether `gpu` admits one more batch of priority `p`.
    pub fn admits(&self, gpu: &GpuRuntimeState, p: PriorityLevel) -> bool {
        if gpu.running.len() >= self.config.global_limit {
            return false;
        }
        match p {
            PriorityLevel::High => gpu.count_priority(PriorityLevel::High) < self.config.hp_limit,
            PriorityLevel::Low => gpu.count_priority(PriorityLevel::Low) < self.lp_allowance,
        }
    }
}

fn isolated_estimate(cand: &Candidate<'_>, link: &PcieLinkState, now: Millis) -> LatencyEstimate {
    let isolated = cand.profile.inf(cand.size);
    let data = link.estimate_upstream_delay(now);
    let queue = now - cand.front_enqueue;
    LatencyEstimate {
        total: isolated + data + queue,
        isolated,
        data,
        kernel: 0.0,
        queue,
        intf: 1.0,
    }
}

/// Least-loaded GPU among those passing `admit`, lowest id on ties.
fn least_loaded<'a>(
    gpus: &'a [GpuRuntimeState],
    admit: impl Fn(&GpuRuntimeState) -> bool,
) -> Option<&'a GpuRuntimeState> {
    gpus.iter().filter(|g| admit(g)).min_by_key(|g| (g.running.len(), g.gpu_id))
}

fn place(
    s: &Scheduler,
    gpu: &GpuRuntimeState,
    cand: &Candidate<'_>,
    now: Millis,
) -> Result<Placement, SchedulerError> {
    let assumed: Vec<f64> = gpu
        .aggregate_throughput
        .iter()
        .map(|x| x * s.config.meet_fraction)
        .collect();
    let estimate = s
        .predictor
        .estimate_latency(cand.profile, cand.size, cand.front_enqueue, &gpu.pcie, now, &assumed)?;
    Ok(Placement {
        gpu: gpu.gpu_id,
        estimate,
        assumed,
    })
}

/// One batch per GPU. The batch is the largest prefix, up to `cand.size`,
/// whose isolated latency plus time already queued meets the front deadline.
pub(crate) fn temporal_pick(
    s: &Scheduler,
    cand: &Candidate<'_>,
    now: Millis,
) -> Result<Option<(usize, Placement)>, SchedulerError> {
    let Some(gpu) = s.gpus.iter().find(|g| g.running.is_empty()) else {
        return Ok(None);
    };
    let size = (1..=cand.size)
        .rev()
        .find(|&k| now + cand.profile.inf(k) <= cand.deadline_abs)
        .unwrap_or(1);
    let c = Candidate { size, ..*cand };
    let estimate = isolated_estimate(&c, &gpu.pcie, now);
    Ok(Some((
        size,
        Placement {
            gpu: gpu.gpu_id,
            estimate,
            assumed: vec![0.0; gpu.metric_count()],
        },
    )))
}

/// Up to `static_cap` concurrent batches per GPU, no interference checks.
pub(crate) fn static_spatial_pick(
    s: &Scheduler,
    cand: &Candidate<'_>,
    now: Millis,
) -> Result<Option<(usize, Placement)>, SchedulerError> {
    let cap = s.config.static_cap;
    match least_loaded(&s.gpus, |g| g.running.len() < cap) {
        Some(g) => Ok(Some((cand.size, place(s, g, cand, now)?))),
        None => Ok(None),
    }
}

/// Global and per-class caps, with the low-priority cap driven by
/// [`ReactiveState`].
pub(crate) fn reactive_spatial_pick(
    s: &Scheduler,
    cand: &Candidate<'_>,
    now: Millis,
) -> Result<Option<(usize, Placement)>, SchedulerError> {
    match least_loaded(&s.gpus, |g| s.reactive.admits(g, cand.priority())) {
        Some(g) => Ok(Some((cand.size, place(s, g, cand, now)?))),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Request;
    use crate::predictor::Predictor;
    use crate::profile::builtin_profile_set;
    use crate::scheduler::{Ablation, PolicyKind, SchedulerConfig};

    fn sched(policy: PolicyKind, gpus: usize) -> Scheduler {
        Scheduler::new(
            builtin_profile_set(),
            gpus,
            policy,
            Ablation::default(),
            SchedulerConfig::default(),
            Predictor::initial(5),
        )
    }

    fn fill(s: &mut Scheduler, model: usize, n: u64, at: f64) {
        let d = s.profiles.get(model).deadline;
        for i in 0..n {
            s.enqueue(Request::new(i, model, at, d));
        }
    }

    #[test]
    fn allowance_decrements_with_floor() {
        let mut r = ReactiveState::new(ReactiveConfig::default(), 0.0);
        r.on_hp_violation();
        assert_eq!(r.lp_allowance, 2);
        r.on_hp_violation();
        r.on_hp_violation();
        r.on_hp_violation();
        assert_eq!(r.lp_allowance, 1);
    }

    #[test]
    fn allowance_resets_every_period() {
        let mut r = ReactiveState::new(ReactiveConfig::default(), 0.0);
        r.on_hp_violation();
        r.on_hp_violation();
        r.tick(199.0);
        assert_eq!(r.lp_allowance, 1);
        r.tick(200.0);
        assert_eq!(r.lp_allowance, 3);
        assert_eq!(r.last_reset, 200.0);
    }

    #[test]
    fn temporal_defers_when_busy() {
        let mut s = sched(PolicyKind::Temporal, 1);
        fill(&mut s, 0, 8, 0.0);
        let first = s.pass(0.0).unwrap();
        assert_eq!(first.dispatched.len(), 1);
        fill(&mut s, 1, 8, 0.0);
        assert!(s.pass(0.0).unwrap().dispatched.is_empty());
    }

    #[test]
    fn temporal_size_fits_isolated_latency() {
        let mut s = sched(PolicyKind::Temporal, 1);
        fill(&mut s, 0, 8, 0.0);
        // 3 ms of slack left: 1.0 + 0.35k ≤ 3 holds up to k = 5
        let out = s.pass(5.0).unwrap();
        assert_eq!(out.dispatched[0].0.size, 5);
    }

    #[test]
    fn static_spatial_caps_at_three() {
        let mut s = sched(PolicyKind::StaticSpatial, 1);
        fill(&mut s, 5, 40, 0.0);
        let out = s.pass(0.0).unwrap();
        assert_eq!(out.dispatched.len(), 3);
        assert!(out.dispatched.iter().all(|d| d.0.size == 8));
        assert_eq!(s.gpus[0].running.len(), 3);
    }

    #[test]
    fn static_spatial_ignores_interference() {
        let mut s = sched(PolicyKind::StaticSpatial, 1);
        s.predictor.params.k = 1e3;
        fill(&mut s, 5, 16, 0.0);
        assert_eq!(s.pass(0.0).unwrap().dispatched.len(), 2);
    }

    #[test]
    fn reactive_lp_deferred_hp_admitted() {
        let mut s = sched(PolicyKind::ReactiveSpatial, 1);
        s.reactive.lp_allowance = 1;
        fill(&mut s, 5, 8, 0.0);
        assert_eq!(s.pass(0.0).unwrap().dispatched.len(), 1);
        fill(&mut s, 4, 8, 0.0);
        fill(&mut s, 0, 8, 0.0);
        let out = s.pass(0.0).unwrap();
        assert_eq!(out.dispatched.len(), 1);
        assert_eq!(out.dispatched[0].0.priority, PriorityLevel::High);
    }
}
