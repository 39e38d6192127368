//! Run metrics computed from an event trace, and profile perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Millis, ModelProfile, PriorityLevel};
use crate::trace::{EventTrace, TraceKind};

/// Nearest-rank percentile of unsorted `values`. `None` when empty.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(nearest_rank(&v, p))
}

/// Nearest-rank percentile of sorted `sorted`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub arrivals: usize,
    pub completed: usize,
    pub late: usize,
    pub dropped: usize,
    pub violation_pct: f64,
    pub p50: Option<Millis>,
    pub p95: Option<Millis>,
    pub p99: Option<Millis>,
    /// Requests completed within their deadline per window, in req/s.
    pub goodput: Vec<f64>,
}

impl ClassMetrics {
    pub fn met(&self) -> usize {
        self.completed - self.late
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub p50_abs: Option<f64>,
    pub p95_abs: Option<f64>,
    pub p99_abs: Option<f64>,
}

impl ErrorSummary {
    pub fn of(errors: &[f64]) -> Self {
        let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        Self {
            count: abs.len(),
            p50_abs: percentile(&abs, 50.0),
            p95_abs: percentile(&abs, 95.0),
            p99_abs: percentile(&abs, 99.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// The trace ended before the run did.
    pub partial: bool,
    pub window_ms: Millis,
    pub high: ClassMetrics,
    pub low: ClassMetrics,
    pub batches: usize,
    /// Signed relative error of the interference degree predicted on the
    /// measured co-location, one per completed batch.
    pub intf_error: Vec<f64>,
    /// Same, for the prediction made at dispatch.
    pub intf_error_dispatch: Vec<f64>,
    /// Same, for the frozen snapshot (batches after a parameter shift).
    pub intf_error_frozen: Vec<f64>,
    /// Signed relative error of the dispatch-time latency estimate.
    pub latency_error: Vec<f64>,
    /// `|measured - isolated| / isolated` kernel time per batch.
    pub kernel_overhead: Vec<f64>,
    /// `(time, gpu, c_low)` for every cap change.
    pub c_low: Vec<(Millis, usize, f64)>,
}

impl MetricsReport {
    pub fn class(&self, p: PriorityLevel) -> &ClassMetrics {
        match p {
            PriorityLevel::High => &self.high,
            PriorityLevel::Low => &self.low,
        }
    }

    fn class_mut(&mut self, p: PriorityLevel) -> &mut ClassMetrics {
        match p {
            PriorityLevel::High => &mut self.high,
            PriorityLevel::Low => &mut self.low,
        }
    }

    pub fn summary(&self) -> Summary {
        Summary {
            partial: self.partial,
            high: ClassSummary::of(&self.high),
            low: ClassSummary::of(&self.low),
            batches: self.batches,
            intf_error: ErrorSummary::of(&self.intf_error),
            intf_error_dispatch: ErrorSummary::of(&self.intf_error_dispatch),
            intf_error_frozen: ErrorSummary::of(&self.intf_error_frozen),
            latency_error: ErrorSummary::of(&self.latency_error),
            kernel_overhead: ErrorSummary::of(&self.kernel_overhead),
            final_c_low: self.c_low.last().map(|c| c.2),
        }
    }
}

/// Scalar view of a class for the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub arrivals: usize,
    pub completed: usize,
    pub late: usize,
    pub dropped: usize,
    pub violation_pct: f64,
    pub p50: Option<Millis>,
    pub p95: Option<Millis>,
    pub p99: Option<Millis>,
    pub mean_goodput: f64,
}

impl ClassSummary {
    fn of(c: &ClassMetrics) -> Self {
        let mean_goodput = if c.goodput.is_empty() {
            0.0
        } else {
            c.goodput.iter().sum::<f64>() / c.goodput.len() as f64
        };
        Self {
            arrivals: c.arrivals,
            completed: c.completed,
            late: c.late,
            dropped: c.dropped,
            violation_pct: c.violation_pct,
            p50: c.p50,
            p95: c.p95,
            p99: c.p99,
            mean_goodput,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub partial: bool,
    pub high: ClassSummary,
    pub low: ClassSummary,
    pub batches: usize,
    pub intf_error: ErrorSummary,
    pub intf_error_dispatch: ErrorSummary,
    pub intf_error_frozen: ErrorSummary,
    pub latency_error: ErrorSummary,
    pub kernel_overhead: ErrorSummary,
    pub final_c_low: Option<f64>,
}

fn rel(pred: f64, actual: f64) -> f64 {
    (pred - actual) / actual
}

pub fn compute_metrics(trace: &EventTrace, window_ms: Millis) -> MetricsReport {
    let mut report = MetricsReport {
        partial: !trace.is_complete() && !trace.is_empty(),
        window_ms,
        ..Default::default()
    };
    let mut latencies: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut met_at: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut horizon: Millis = 0.0;

    for r in &trace.records {
        horizon = horizon.max(r.time);
        let Some(prio) = r.priority else {
            if r.kind == TraceKind::CapChange {
                if let (Some(g), Some(c)) = (r.gpu, r.c_low) {
                    report.c_low.push((r.time, g, c));
                }
            }
            continue;
        };
        let i = prio.index();
        match r.kind {
            TraceKind::Arrival => report.class_mut(prio).arrivals += 1,
            TraceKind::Drop => report.class_mut(prio).dropped += 1,
            TraceKind::Complete => {
                let c = report.class_mut(prio);
                c.completed += 1;
                let late = r.time > r.deadline.unwrap_or(f64::INFINITY);
                if late {
                    c.late += 1;
                } else {
                    met_at[i].push(r.time);
                }
                if let Some(l) = r.latency {
                    latencies[i].push(l);
                }
            }
            TraceKind::KernelComplete => {
                report.batches += 1;
                if let (Some(m), Some(isol)) = (r.kernel_measured, r.kernel_isol) {
                    let actual = m / isol;
                    report.kernel_overhead.push((m - isol).abs() / isol);
                    if let Some(p) = r.intf_model {
                        report.intf_error.push(rel(p, actual));
                    }
                    if let Some(p) = r.intf_frozen {
                        report.intf_error_frozen.push(rel(p, actual));
                    }
                    if let Some(p) = r.intf_pred {
                        report.intf_error_dispatch.push(rel(p, actual));
                    }
                }
                if let (Some(e), Some(l)) = (r.est_latency, r.latency) {
                    report.latency_error.push(rel(e, l));
                }
            }
            _ => {}
        }
    }

    let windows = if window_ms > 0.0 {
        ((horizon / window_ms).floor() as usize + 1).max(1)
    } else {
        0
    };
    for p in PriorityLevel::ALL {
        let i = p.index();
        let c = report.class_mut(p);
        let violations = c.late + c.dropped;
        c.violation_pct = if c.arrivals == 0 {
            0.0
        } else {
            100.0 * violations as f64 / c.arrivals as f64
        };
        let mut sorted = std::mem::take(&mut latencies[i]);
        sorted.sort_by(f64::total_cmp);
        if !sorted.is_empty() {
            c.p50 = Some(nearest_rank(&sorted, 50.0));
            c.p95 = Some(nearest_rank(&sorted, 95.0));
            c.p99 = Some(nearest_rank(&sorted, 99.0));
        }
        let mut counts = vec![0usize; windows];
        for t in &met_at[i] {
            let w = ((t / window_ms).floor() as usize).min(windows.saturating_sub(1));
            counts[w] += 1;
        }
        c.goodput = counts.iter().map(|n| *n as f64 * 1000.0 / window_ms).collect();
    }
    report
}

/// Multiplies every throughput value by `1 + u`, `u ~ U(-m, m)` with
/// `m = magnitude_percent / 100`, and clamps to `[0, 1]`. Latencies are kept.
pub fn perturb_profiles(profiles: &[ModelProfile], magnitude_percent: f64, seed: u64) -> Vec<ModelProfile> {
    assert!(
        (0.0..=100.0).contains(&magnitude_percent),
        "perturbation magnitude must be within [0, 100]"
    );
    let m = magnitude_percent / 100.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |x: &mut f64| {
        if m > 0.0 {
            let u: f64 = rng.random_range(-m..=m);
            *x = (*x * (1.0 + u)).clamp(0.0, 1.0);
        }
    };
    profiles
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.m_metric.iter_mut().flatten().for_each(&mut jitter);
            q.m_self_cmp.iter_mut().for_each(&mut jitter);
            q.m_self_mem.iter_mut().for_each(&mut jitter);
            q
        })
        .collect()
}
