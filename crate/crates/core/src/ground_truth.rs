//! Hidden interference oracle of the simulator.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::PriorityLevel;
use crate::predictor::PredictorParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroundTruthError {
    #[error("ground truth requires beta > 1, got {0}")]
    Beta(f64),
    #[error("ground truth requires kappa > 0, got {0}")]
    Kappa(f64),
    #[error("ground truth requires sigma >= 0, got {0}")]
    Sigma(f64),
    #[error("ground truth has {got} metric weights, profiles have {expected}")]
    Width { expected: usize, got: usize },
    #[error("ground truth priority factors must be non-negative")]
    Gamma,
}

/// Functional form of the oracle's effect term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// `κ·β^x + C*`, the predictor's own hypothesis class.
    #[default]
    Exponential,
    /// `κ·β·x² + C*`, for robustness under model mismatch.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthParams {
    pub kappa: f64,
    pub beta: f64,
    pub c_star: f64,
    pub w: Vec<f64>,
    pub w_cmp: f64,
    pub w_mem: f64,
    /// Indexed by [`PriorityLevel::index`].
    pub gamma: [f64; 2],
    /// Log-space standard deviation of the per-batch noise factor.
    pub sigma: f64,
    pub family: Family,
    /// Actual upload time as a multiple of the profiled one.
    pub htod_scale: f64,
}

/// Defaults clamp the effect to zero for every built-in profile running
/// alone, so isolated execution takes exactly the profiled time.
impl Default for GroundTruthParams {
    fn default() -> Self {
        Self {
            kappa: 0.4,
            beta: 2.5,
            c_star: -0.5,
            w: vec![0.4; 5],
            w_cmp: 0.3,
            w_mem: 0.3,
            gamma: [0.6, 1.0],
            sigma: 0.05,
            family: Family::Exponential,
            htod_scale: 1.0,
        }
    }
}

impl GroundTruthParams {
    pub fn validate(&self, metric_count: usize) -> Result<(), GroundTruthError> {
        if !(self.beta > 1.0) {
            return Err(GroundTruthError::Beta(self.beta));
        }
        if !(self.kappa > 0.0) {
            return Err(GroundTruthError::Kappa(self.kappa));
        }
        if !(self.sigma >= 0.0) {
            return Err(GroundTruthError::Sigma(self.sigma));
        }
        if self.w.len() != metric_count {
            return Err(GroundTruthError::Width {
                expected: metric_count,
                got: self.w.len(),
            });
        }
        if self.gamma.iter().any(|g| !(*g >= 0.0)) {
            return Err(GroundTruthError::Gamma);
        }
        Ok(())
    }

    /// Predictor parameters with the same functional values, for tests that
    /// start the learner at the truth.
    pub fn as_predictor_params(&self) -> PredictorParams {
        PredictorParams {
            k: self.kappa,
            b: self.beta,
            c: self.c_star,
            w: self.w.clone(),
            w_cmp: self.w_cmp,
            w_mem: self.w_mem,
            coeff: self.gamma,
        }
    }

    /// Gives high priority the same factor as low priority.
    pub fn without_priority_advantage(&self) -> Self {
        let mut p = self.clone();
        p.gamma[PriorityLevel::High.index()] = p.gamma[PriorityLevel::Low.index()];
        p
    }

    /// Per-batch noise factor, lognormal with median 1. `σ = 0` gives 1.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return 1.0;
        }
        LogNormal::new(0.0, self.sigma).expect("valid sigma").sample(rng)
    }

    pub fn pressure(&self, aggregate: &[f64], self_cmp: f64, self_mem: f64) -> f64 {
        let lr: f64 = self.w.iter().zip(aggregate).map(|(w, a)| w * a).sum();
        lr + self.w_cmp * self_cmp + self.w_mem * self_mem
    }

    pub fn effect(&self, pressure: f64) -> f64 {
        let raw = match self.family {
            Family::Exponential => self.kappa * self.beta.powf(pressure) + self.c_star,
            Family::Quadratic => self.kappa * self.beta * pressure * pressure + self.c_star,
        };
        raw.max(0.0)
    }
}

/// `1 + max(0, effect(pressure))·γ_p·ε`.
pub fn ground_truth_slowdown(
    aggregate: &[f64],
    self_cmp: f64,
    self_mem: f64,
    priority: PriorityLevel,
    noise: f64,
    params: &GroundTruthParams,
) -> f64 {
    let x = params.pressure(aggregate, self_cmp, self_mem);
    1.0 + params.effect(x) * params.gamma[priority.index()] * noise
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> GroundTruthParams {
        GroundTruthParams {
            kappa: 1.0,
            beta: 2.0,
            c_star: -1.0,
            w: vec![1.0],
            w_cmp: 0.0,
            w_mem: 0.0,
            gamma: [1.0, 1.0],
            sigma: 0.0,
            family: Family::Exponential,
            htod_scale: 1.0,
        }
    }

    #[test]
    fn isolation_is_unit_slowdown() {
        let p = unit();
        assert_eq!(ground_truth_slowdown(&[0.0], 0.0, 0.0, PriorityLevel::Low, 1.0, &p), 1.0);
    }

    #[test]
    fn direct_evaluation() {
        let p = unit();
        assert_eq!(ground_truth_slowdown(&[1.0], 0.0, 0.0, PriorityLevel::Low, 1.0, &p), 2.0);
    }

    #[test]
    fn high_priority_factor_lowers_slowdown() {
        let mut p = unit();
        p.gamma = [0.5, 1.0];
        let hi = ground_truth_slowdown(&[1.3], 0.0, 0.0, PriorityLevel::High, 1.0, &p);
        let lo = ground_truth_slowdown(&[1.3], 0.0, 0.0, PriorityLevel::Low, 1.0, &p);
        assert!(hi < lo);
        let flat = p.without_priority_advantage();
        assert_eq!(
            ground_truth_slowdown(&[1.3], 0.0, 0.0, PriorityLevel::High, 1.0, &flat),
            lo
        );
    }

    #[test]
    fn zero_sigma_noise_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(unit().draw_noise(&mut rng), 1.0);
        let mut p = unit();
        p.sigma = 0.1;
        let x = p.draw_noise(&mut rng);
        assert!(x > 0.0 && x != 1.0);
    }

    #[test]
    fn quadratic_family() {
        let mut p = unit();
        p.family = Family::Quadratic;
        // 1·2·1.5² − 1 = 3.5
        assert!((ground_truth_slowdown(&[1.5], 0.0, 0.0, PriorityLevel::Low, 1.0, &p) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn defaults_leave_isolated_batches_unslowed() {
        let truth = GroundTruthParams::default();
        for p in crate::profile::builtin_profiles() {
            for size in 1..=p.max_batch_size {
                let zero = vec![0.0; p.metric_count()];
                let s = ground_truth_slowdown(&zero, p.self_cmp(size), p.self_mem(size), p.priority, 1.3, &truth);
                assert_eq!(s, 1.0, "{} size {size}", p.model_id);
            }
        }
    }

    #[test]
    fn validation() {
        let mut p = unit();
        assert!(p.validate(1).is_ok());
        assert!(p.validate(2).is_err());
        p.beta = 1.0;
        assert_eq!(p.validate(1), Err(GroundTruthError::Beta(1.0)));
        let mut p = unit();
        p.sigma = -0.1;
        assert!(p.validate(1).is_err());
    }
}
