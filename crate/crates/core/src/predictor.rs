//! Batch-level kernel interference prediction and its online calibration.
//!
//! The co-located resource pressure is a weighted sum of the aggregate
//! co-located throughput per metric plus the batch's own compute and memory
//! throughput. Interference grows exponentially with that pressure:
//!
//! ```text
//! pressure = Σ w[i]·m_avg[i] + w_cmp·m_self_cmp + w_mem·m_self_mem
//! effect   = clamp(k · b^pressure + C, 0, cap)
//! intf     = 1 + effect · coeff[priority]
//! delay    = (intf - 1) · t_kernel_isol
//! ```
//!
//! After every completed batch the measured slowdown is fed back and one Adam
//! step is taken on the Huber loss of the residual.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Millis, ModelProfile, PriorityLevel};
use crate::pcie::PcieLinkState;

/// Upper bound on the interference effect.
pub const DEFAULT_EFFECT_CAP: f64 = 50.0;
pub const B_FLOOR: f64 = 1.0 + 1e-6;
pub const K_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictorError {
    #[error("expected {expected} co-location metrics, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch size {size} is not profiled for {model}")]
    MissingProfileEntry { model: String, size: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorParams {
    pub k: f64,
    pub b: f64,
    pub c: f64,
    pub w: Vec<f64>,
    pub w_cmp: f64,
    pub w_mem: f64,
    /// Indexed by [`PriorityLevel::index`].
    pub coeff: [f64; 2],
}

impl PredictorParams {
    /// Conservative starting point: a small positive interference estimate.
    pub fn initial(metric_count: usize) -> Self {
        Self {
            k: 0.1,
            b: std::f64::consts::E,
            c: 0.0,
            w: vec![0.1; metric_count],
            w_cmp: 0.1,
            w_mem: 0.1,
            coeff: [0.5, 1.0],
        }
    }

    pub fn metric_count(&self) -> usize {
        self.w.len()
    }

    pub fn coeff_for(&self, p: PriorityLevel) -> f64 {
        self.coeff[p.index()]
    }

    pub fn len(&self) -> usize {
        self.w.len() + 7
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat layout: `k, b, C, w[..], w_cmp, w_mem, coeff_high, coeff_low`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend([self.k, self.b, self.c]);
        v.extend(&self.w);
        v.extend([self.w_cmp, self.w_mem, self.coeff[0], self.coeff[1]]);
        v
    }

    pub fn set_from_slice(&mut self, v: &[f64]) {
        let n = self.w.len();
        assert_eq!(v.len(), n + 7);
        self.k = v[0];
        self.b = v[1];
        self.c = v[2];
        self.w.copy_from_slice(&v[3..3 + n]);
        self.w_cmp = v[3 + n];
        self.w_mem = v[4 + n];
        self.coeff = [v[5 + n], v[6 + n]];
    }

    /// Flat index of `coeff[p]`.
    pub fn coeff_index(&self, p: PriorityLevel) -> usize {
        self.w.len() + 5 + p.index()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }
}

/// `Σ w[i]·m_avg[i] + w_cmp·m_self_cmp + w_mem·m_self_mem`.
pub fn pressure_exponent(
    m_avg: &[f64],
    m_self_cmp: f64,
    m_self_mem: f64,
    params: &PredictorParams,
) -> Result<f64, PredictorError> {
    if m_avg.len() != params.w.len() {
        return Err(PredictorError::DimensionMismatch {
            expected: params.w.len(),
            got: m_avg.len(),
        });
    }
    let lr: f64 = params.w.iter().zip(m_avg).map(|(w, m)| w * m).sum();
    Ok(lr + params.w_cmp * m_self_cmp + params.w_mem * m_self_mem)
}

/// Interference effect with its clamp state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Effect {
    pub value: f64,
    /// The raw value was below zero and has been clamped to 0.
    pub floored: bool,
    /// The raw value overflowed the cap (or was not finite).
    pub saturated: bool,
}

/// `k·b^exponent + C`, clamped to `[0, cap]`.
pub fn kernel_effect_capped(exponent: f64, params: &PredictorParams, cap: f64) -> Effect {
    let raw = params.k * params.b.powf(exponent) + params.c;
    if raw.is_nan() || raw > cap {
        Effect {
            value: cap,
            floored: false,
            saturated: true,
        }
    } else if raw < 0.0 {
        Effect {
            value: 0.0,
            floored: true,
            saturated: false,
        }
    } else {
        Effect {
            value: raw,
            floored: false,
            saturated: false,
        }
    }
}

pub fn kernel_effect(exponent: f64, params: &PredictorParams) -> f64 {
    kernel_effect_capped(exponent, params, DEFAULT_EFFECT_CAP).value
}

/// `1 + kernel_eff·coeff[priority]`.
pub fn interference_degree(kernel_eff: f64, priority: PriorityLevel, params: &PredictorParams) -> f64 {
    1.0 + kernel_eff * params.coeff_for(priority)
}

/// `(intf - 1)·t_kernel_isol`.
pub fn kernel_delay(intf: f64, t_kernel_isol: Millis) -> Millis {
    (intf - 1.0) * t_kernel_isol
}

/// Huber loss with threshold `delta`.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to the residual.
pub fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0075,
            beta1: 0.7,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub adam: AdamConfig,
    pub huber_delta: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            adam: AdamConfig::default(),
            huber_delta: 0.5,
        }
    }

    /// One Adam step over the parameters where `mask` is true. The step
    /// counter advances even when every gradient is zero.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], mask: &[bool]) {
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            eps,
        } = self.adam;
        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for i in 0..theta.len() {
            if !mask[i] {
                continue;
            }
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            theta[i] -= alpha * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Observed outcome of one completed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSample {
    pub batch_id: u64,
    /// Time-weighted co-located throughput over the batch's kernel execution.
    pub m_avg_twa: Vec<f64>,
    pub m_self_cmp: f64,
    pub m_self_mem: f64,
    pub priority: PriorityLevel,
    /// Prediction made at scheduling time.
    pub intf_predicted: f64,
    /// Measured kernel latency over profiled isolated kernel latency.
    pub intf_actual: f64,
}

/// Huber loss of one sample and its gradient in the flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub prediction: f64,
    pub residual: f64,
    pub loss: f64,
    pub grad: Vec<f64>,
    pub effect: Effect,
}

/// Analytic gradient of the Huber loss through the clamp, the exponential and
/// the priority coefficient. Only `coeff[sample.priority]` receives a gradient.
pub fn loss_gradient(
    params: &PredictorParams,
    sample: &FeedbackSample,
    delta: f64,
    cap: f64,
) -> Result<LossGradient, PredictorError> {
    let x = pressure_exponent(&sample.m_avg_twa, sample.m_self_cmp, sample.m_self_mem, params)?;
    let effect = kernel_effect_capped(x, params, cap);
    let coeff = params.coeff_for(sample.priority);
    let prediction = 1.0 + effect.value * coeff;
    let residual = prediction - sample.intf_actual;
    let dr = huber_grad(residual, delta);

    let n = params.w.len();
    let mut grad = vec![0.0; params.len()];
    if !effect.floored && !effect.saturated {
        let bx = params.b.powf(x);
        // d effect / d exponent
        let d_x = params.k * bx * params.b.ln();
        let scale = dr * coeff;
        grad[0] = scale * bx;
        grad[1] = scale * params.k * x * params.b.powf(x - 1.0);
        grad[2] = scale;
        for i in 0..n {
            grad[3 + i] = scale * d_x * sample.m_avg_twa[i];
        }
        grad[3 + n] = scale * d_x * sample.m_self_cmp;
        grad[4 + n] = scale * d_x * sample.m_self_mem;
    }
    grad[params.coeff_index(sample.priority)] = dr * effect.value;

    Ok(LossGradient {
        prediction,
        residual,
        loss: huber(residual, delta),
        grad,
        effect,
    })
}

/// Result of one feedback step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    /// Prediction under the parameters in force before the step.
    pub prediction: f64,
    pub residual: f64,
    /// The effect hit the cap; the sample is flagged but still used.
    pub saturated: bool,
    /// Non-finite gradient; parameters untouched.
    pub skipped: bool,
}

/// One Adam step on the Huber loss of `sample`, with the prediction
/// recomputed under the current parameters.
pub fn feedback_update(
    params: &mut PredictorParams,
    opt: &mut OptimizerState,
    sample: &FeedbackSample,
    cap: f64,
) -> Result<UpdateOutcome, PredictorError> {
    let g = loss_gradient(params, sample, opt.huber_delta, cap)?;
    let mut outcome = UpdateOutcome {
        prediction: g.prediction,
        residual: g.residual,
        saturated: g.effect.saturated,
        skipped: false,
    };
    let inputs_finite = sample.m_avg_twa.iter().all(|x| x.is_finite())
        && sample.m_self_cmp.is_finite()
        && sample.m_self_mem.is_finite()
        && sample.intf_actual.is_finite();
    if !inputs_finite || !g.grad.iter().all(|x| x.is_finite()) || !g.residual.is_finite() {
        outcome.skipped = true;
        return Ok(outcome);
    }
    let other = params.coeff_index(match sample.priority {
        PriorityLevel::High => PriorityLevel::Low,
        PriorityLevel::Low => PriorityLevel::High,
    });
    let mask: Vec<bool> = (0..params.len()).map(|i| i != other).collect();
    let mut theta = params.to_vec();
    opt.step(&mut theta, &g.grad, &mask);
    if !theta.iter().all(|x| x.is_finite()) {
        outcome.skipped = true;
        return Ok(outcome);
    }
    params.set_from_slice(&theta);
    params.b = params.b.max(B_FLOOR);
    params.k = params.k.max(K_FLOOR);
    Ok(outcome)
}

/// Breakdown of an end-to-end latency estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyEstimate {
    pub total: Millis,
    pub isolated: Millis,
    pub data: Millis,
    pub kernel: Millis,
    pub queue: Millis,
    pub intf: f64,
}

/// Parameters, optimizer and the effect cap, shared by every GPU of a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predictor {
    pub params: PredictorParams,
    pub optimizer: OptimizerState,
    #[serde(default = "default_cap")]
    pub effect_cap: f64,
    /// A frozen predictor evaluates but never updates.
    #[serde(default)]
    pub frozen: bool,
}

fn default_cap() -> f64 {
    DEFAULT_EFFECT_CAP
}

impl Predictor {
    pub fn new(params: PredictorParams) -> Self {
        let n = params.len();
        Self {
            params,
            optimizer: OptimizerState::new(n),
            effect_cap: DEFAULT_EFFECT_CAP,
            frozen: false,
        }
    }

    pub fn initial(metric_count: usize) -> Self {
        Self::new(PredictorParams::initial(metric_count))
    }

    pub fn frozen_copy(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn predict_intf(
        &self,
        m_avg: &[f64],
        m_self_cmp: f64,
        m_self_mem: f64,
        priority: PriorityLevel,
    ) -> Result<f64, PredictorError> {
        let x = pressure_exponent(m_avg, m_self_cmp, m_self_mem, &self.params)?;
        let eff = kernel_effect_capped(x, &self.params, self.effect_cap).value;
        Ok(interference_degree(eff, priority, &self.params))
    }

    /// End-to-end latency of a batch of `size` requests of `profile` if it
    /// were dispatched now: isolated latency, upload wait, interference delay
    /// under `assumed_m_avg`, and time already spent queued.
    pub fn estimate_latency(
        &self,
        profile: &ModelProfile,
        size: usize,
        front_enqueue_time: Millis,
        link: &PcieLinkState,
        now: Millis,
        assumed_m_avg: &[f64],
    ) -> Result<LatencyEstimate, PredictorError> {
        if !profile.has_size(size) {
            return Err(PredictorError::MissingProfileEntry {
                model: profile.model_id.clone(),
                size,
            });
        }
        let intf = self.predict_intf(
            assumed_m_avg,
            profile.self_cmp(size),
            profile.self_mem(size),
            profile.priority,
        )?;
        let isolated = profile.inf(size);
        let data = link.estimate_upstream_delay(now);
        let kernel = kernel_delay(intf, profile.kernel(size));
        let queue = now - front_enqueue_time;
        Ok(LatencyEstimate {
            total: isolated + data + kernel + queue,
            isolated,
            data,
            kernel,
            queue,
            intf,
        })
    }

    /// Feeds back one completed batch. A frozen predictor only evaluates.
    pub fn update(&mut self, sample: &FeedbackSample) -> Result<UpdateOutcome, PredictorError> {
        if self.frozen {
            let g = loss_gradient(&self.params, sample, self.optimizer.huber_delta, self.effect_cap)?;
            return Ok(UpdateOutcome {
                prediction: g.prediction,
                residual: g.residual,
                saturated: g.effect.saturated,
                skipped: true,
            });
        }
        feedback_update(&mut self.params, &mut self.optimizer, sample, self.effect_cap)
    }

    pub fn to_checkpoint(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor serializes")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, PredictorError> {
        let p: Predictor = serde_json::from_str(text).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
        if p.optimizer.m.len() != p.params.len() || p.optimizer.v.len() != p.params.len() {
            return Err(PredictorError::Checkpoint("optimizer state does not match parameter count".into()));
        }
        if !p.params.is_finite() || p.params.b <= 1.0 || p.params.k <= 0.0 {
            return Err(PredictorError::Checkpoint("parameters out of range".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let text = fs::read_to_string(path).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&text)
    }
}

/// Writes the `batch_id,predicted,actual,residual` feedback log.
pub fn write_feedback_log<W: Write>(out: W, rows: &[(u64, f64, f64)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["batch_id", "predicted", "actual", "residual"])?;
    for (id, pred, actual) in rows {
        w.serialize((id, pred, actual, pred - actual))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::builtin_profiles;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_params(n: usize) -> PredictorParams {
        PredictorParams {
            k: 1.0,
            b: 2.0,
            c: 0.0,
            w: vec![0.0; n],
            w_cmp: 0.0,
            w_mem: 0.0,
            coeff: [0.5, 1.0],
        }
    }

    #[test]
    fn pressure_examples() {
        let mut p = zero_params(5);
        assert_eq!(pressure_exponent(&[0.3; 5], 0.4, 0.5, &p).unwrap(), 0.0);
        p.w[0] = 1.0;
        assert_eq!(pressure_exponent(&[0.7, 0.2, 0.2, 0.2, 0.2], 0.4, 0.5, &p).unwrap(), 0.7);
        p.w = vec![0.5, 0.5, 0.0, 0.0, 0.0];
        p.w_cmp = 0.2;
        p.w_mem = 0.1;
        let x = pressure_exponent(&[0.4, 0.6, 0.0, 0.0, 0.0], 0.5, 0.3, &p).unwrap();
        assert!((x - 0.63).abs() < 1e-15);
    }

    #[test]
    fn pressure_dimension_mismatch() {
        let p = zero_params(5);
        assert_eq!(
            pressure_exponent(&[0.1; 4], 0.0, 0.0, &p),
            Err(PredictorError::DimensionMismatch { expected: 5, got: 4 })
        );
    }

    #[test]
    fn effect_examples() {
        let mut p = zero_params(5);
        p.c = -1.0;
        assert_eq!(kernel_effect(0.0, &p), 0.0);
        p.k = 0.5;
        p.b = std::f64::consts::E;
        p.c = 0.0;
        assert!((kernel_effect(1.0, &p) - 0.5 * std::f64::consts::E).abs() < 1e-12);
        assert!((kernel_effect(1.0, &p) - 1.3591).abs() < 1e-4);
        p.k = 1.0;
        p.b = 2.0;
        p.c = -2.0;
        let e = kernel_effect_capped(0.0, &p, DEFAULT_EFFECT_CAP);
        assert_eq!(e.value, 0.0);
        assert!(e.floored);
    }

    #[test]
    fn effect_saturates() {
        let p = zero_params(5);
        let e = kernel_effect_capped(1e4, &p, DEFAULT_EFFECT_CAP);
        assert_eq!(e.value, DEFAULT_EFFECT_CAP);
        assert!(e.saturated);
    }

    #[test]
    fn degree_and_delay_examples() {
        let p = zero_params(5);
        assert_eq!(interference_degree(0.0, PriorityLevel::High, &p), 1.0);
        assert_eq!(interference_degree(0.0, PriorityLevel::Low, &p), 1.0);
        assert!((interference_degree(0.8, PriorityLevel::High, &p) - 1.4).abs() < 1e-15);
        assert!((interference_degree(0.8, PriorityLevel::Low, &p) - 1.8).abs() < 1e-15);
        assert_eq!(kernel_delay(1.0, 7.0), 0.0);
        assert_eq!(kernel_delay(1.5, 4.0), 2.0);
        assert!((kernel_delay(3.6, 2.0) - 5.2).abs() < 1e-12);
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber_grad(0.3, 0.5), 0.3);
        assert_eq!(huber_grad(-0.3, 0.5), -0.3);
        assert_eq!(huber_grad(2.0, 0.5), 0.5);
        assert_eq!(huber_grad(-2.0, 0.5), -0.5);
        assert!((huber(2.0, 0.5) - 0.875).abs() < 1e-15);
    }

    fn isolated_profile() -> ModelProfile {
        builtin_profiles().remove(0)
    }

    #[test]
    fn isolated_latency_estimate() {
        let profile = isolated_profile();
        let mut pred = Predictor::initial(5);
        pred.params.c = -1e3;
        let est = pred
            .estimate_latency(&profile, 4, 10.0, &PcieLinkState::new(0.0), 10.0, &[0.0; 5])
            .unwrap();
        assert_eq!(est.total, profile.inf(4));
        assert_eq!(est.intf, 1.0);
    }

    #[test]
    fn latency_component_sum() {
        // t_inf_isol = 6, T_queue = 3, T_data = 1, kernel delay = 2
        let mut profile = isolated_profile();
        profile.t_inf_isol[0] = 6.0;
        profile.t_htod_isol[0] = 1.0;
        profile.t_kernel_isol[0] = 4.0;
        let mut pred = Predictor::new(zero_params(5));
        pred.params.c = 0.0; // effect = k·b^0 = 1
        pred.params.coeff = [0.5, 0.5];
        let link = PcieLinkState::new(11.0);
        let est = pred.estimate_latency(&profile, 1, 7.0, &link, 10.0, &[0.0; 5]).unwrap();
        assert_eq!(est.queue, 3.0);
        assert_eq!(est.data, 1.0);
        assert_eq!(est.kernel, 2.0);
        assert_eq!(est.total, 12.0);
        let busier = PcieLinkState::new(14.0);
        let est = pred.estimate_latency(&profile, 1, 7.0, &busier, 10.0, &[0.0; 5]).unwrap();
        assert_eq!(est.total, 15.0);
    }

    #[test]
    fn missing_profile_entry() {
        let pred = Predictor::initial(5);
        let err = pred
            .estimate_latency(&isolated_profile(), 9, 0.0, &PcieLinkState::default(), 0.0, &[0.0; 5])
            .unwrap_err();
        assert!(matches!(err, PredictorError::MissingProfileEntry { size: 9, .. }));
    }

    fn sample(m: Vec<f64>, actual: f64, priority: PriorityLevel) -> FeedbackSample {
        FeedbackSample {
            batch_id: 1,
            m_avg_twa: m,
            m_self_cmp: 0.3,
            m_self_mem: 0.2,
            priority,
            intf_predicted: 1.0,
            intf_actual: actual,
        }
    }

    #[test]
    fn zero_residual_leaves_params() {
        let mut pred = Predictor::initial(5);
        let m = vec![0.4, 0.3, 0.2, 0.5, 0.1];
        let exact = pred.predict_intf(&m, 0.3, 0.2, PriorityLevel::Low).unwrap();
        let before = pred.params.clone();
        let out = pred.update(&sample(m, exact, PriorityLevel::Low)).unwrap();
        assert_eq!(out.residual, 0.0);
        assert_eq!(pred.params, before);
        assert_eq!(pred.optimizer.t, 1);
    }

    #[test]
    fn only_own_coefficient_moves() {
        let mut pred = Predictor::initial(5);
        let before = pred.params.coeff;
        pred.update(&sample(vec![0.5; 5], 3.0, PriorityLevel::High)).unwrap();
        assert_ne!(pred.params.coeff[0], before[0]);
        assert_eq!(pred.params.coeff[1], before[1]);
    }

    #[test]
    fn frozen_never_moves() {
        let mut pred = Predictor::initial(5).frozen_copy();
        let before = pred.clone();
        let out = pred.update(&sample(vec![0.5; 5], 3.0, PriorityLevel::High)).unwrap();
        assert!(out.skipped);
        assert_eq!(pred, before);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut pred = Predictor::initial(5);
        let before = pred.clone();
        let out = pred.update(&sample(vec![f64::NAN; 5], 2.0, PriorityLevel::Low)).unwrap();
        assert!(out.skipped);
        assert_eq!(pred.params, before.params);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut pred = Predictor::initial(5);
        for i in 0..20 {
            pred.update(&sample(vec![0.1 * f64::from(i % 7); 5], 2.5, PriorityLevel::Low))
                .unwrap();
        }
        let back = Predictor::from_checkpoint(&pred.to_checkpoint()).unwrap();
        assert_eq!(back, pred);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Predictor::from_checkpoint("{\"params\": 3}").is_err());
    }

    #[test]
    fn feedback_log_rows() {
        let mut buf = Vec::new();
        write_feedback_log(&mut buf, &[(7, 1.5, 1.25)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "batch_id,predicted,actual,residual\n7,1.5,1.25,0.25\n");
    }

    #[test]
    fn log_effect_is_affine_in_exponent() {
        let mut p = zero_params(5);
        p.k = 0.3;
        p.b = 2.7;
        p.c = -0.2;
        let xs: Vec<f64> = (0..20).map(|i| f64::from(i) * 0.25).collect();
        let logs: Vec<f64> = xs.iter().map(|&x| (kernel_effect(x, &p) - p.c).ln()).collect();
        let slope = (logs[1] - logs[0]) / 0.25;
        assert!((slope - p.b.ln()).abs() < 1e-9);
        for i in 2..xs.len() {
            let s = (logs[i] - logs[i - 1]) / 0.25;
            assert!((s - slope).abs() < 1e-9);
        }
    }

    #[test]
    fn floors_hold_after_update() {
        let mut pred = Predictor::initial(5);
        pred.params.b = B_FLOOR;
        pred.params.k = K_FLOOR;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let m: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
            pred.update(&sample(m, 1.0, PriorityLevel::Low)).unwrap();
            assert!(pred.params.b > 1.0 && pred.params.k > 0.0);
        }
    }

    proptest! {
        #[test]
        fn degree_at_least_one(eff in 0.0f64..1e3, high in any::<bool>(), c0 in 0.0f64..10.0, c1 in 0.0f64..10.0) {
            let mut p = zero_params(5);
            p.coeff = [c0, c1];
            let pr = if high { PriorityLevel::High } else { PriorityLevel::Low };
            prop_assert!(interference_degree(eff, pr, &p) >= 1.0);
        }
    }
}
