//! Experiment configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ground_truth::{GroundTruthError, GroundTruthParams};
use crate::model::{Millis, DEFAULT_METRICS};
use crate::predictor::{AdamConfig, PredictorParams, DEFAULT_EFFECT_CAP};
use crate::profile::{builtin_profile_set, ProfileError, ProfileSet};
use crate::scheduler::{Ablation, PolicyKind, SchedulerConfig};
use crate::workload::{ArrivalMode, StreamSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    GroundTruth(#[from] GroundTruthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Starting parameters; a fixed conservative guess when absent.
    pub initial: Option<PredictorParams>,
    /// Start from a saved checkpoint instead.
    pub checkpoint: Option<PathBuf>,
    pub adam: AdamConfig,
    pub huber_delta: f64,
    pub effect_cap: f64,
    /// Never update online.
    pub frozen: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            initial: None,
            checkpoint: None,
            adam: AdamConfig::default(),
            huber_delta: 0.5,
            effect_cap: DEFAULT_EFFECT_CAP,
            frozen: false,
        }
    }
}

/// Replaces the ground truth mid-run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthShift {
    pub at_ms: Millis,
    pub params: GroundTruthParams,
}

/// Scheduler-side profiles differ from the simulated hardware.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub magnitude_percent: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub duration_ms: Millis,
    pub num_gpus: usize,
    pub policy: PolicyKind,
    pub metrics: Vec<String>,
    /// Directory of profile files; the built-in six-model set when absent.
    pub profiles_dir: Option<PathBuf>,
    pub goodput_window_ms: Millis,
    /// Period of the cap and allowance maintenance tick.
    pub tick_ms: Millis,
    /// After the last arrival the run continues this long to drain work.
    pub drain_ms: Millis,
    pub scheduler: SchedulerConfig,
    pub ablation: Ablation,
    pub predictor: PredictorConfig,
    pub ground_truth: GroundTruthParams,
    pub ground_truth_shift: Option<GroundTruthShift>,
    pub profile_perturbation: Option<Perturbation>,
    pub workload: Vec<StreamSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_ms: 10_000.0,
            num_gpus: 4,
            policy: PolicyKind::InterferenceAware,
            metrics: DEFAULT_METRICS.iter().map(|s| s.to_string()).collect(),
            profiles_dir: None,
            goodput_window_ms: 1000.0,
            tick_ms: 100.0,
            drain_ms: 2000.0,
            scheduler: SchedulerConfig::default(),
            ablation: Ablation::default(),
            predictor: PredictorConfig::default(),
            ground_truth: GroundTruthParams::default(),
            ground_truth_shift: None,
            profile_perturbation: None,
            workload: Vec::new(),
        }
    }
}

/// Poisson rates (req/s) of the six built-in models under overload on four
/// GPUs.
pub const OVERLOAD_RATES: [f64; 6] = [4290.0, 2028.0, 1140.0, 1020.0, 2700.0, 780.0];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text)?;
        // relative paths resolve against the config's directory
        if let Some(dir) = path.parent() {
            if let Some(p) = &cfg.profiles_dir {
                if p.is_relative() {
                    cfg.profiles_dir = Some(dir.join(p));
                }
            }
            for s in &mut cfg.workload {
                if let ArrivalMode::Trace { file, .. } = &mut s.mode {
                    if file.is_relative() {
                        *file = dir.join(&*file);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overloaded six-model Poisson workload on a four-GPU node.
    pub fn overload(seed: u64) -> Self {
        let profiles = builtin_profile_set();
        Self {
            seed,
            duration_ms: 5000.0,
            workload: crate::workload::poisson_streams(&profiles, &OVERLOAD_RATES),
            ..Self::default()
        }
    }

    pub fn profiles(&self) -> Result<ProfileSet, ConfigError> {
        Ok(match &self.profiles_dir {
            Some(dir) => ProfileSet::load_dir(dir)?,
            None => builtin_profile_set(),
        })
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self, profiles: &ProfileSet) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.num_gpus == 0 {
            return bad("num_gpus must be positive".into());
        }
        if !(self.duration_ms >= 0.0 && self.duration_ms.is_finite()) {
            return bad(format!("duration_ms must be a non-negative duration, got {}", self.duration_ms));
        }
        if !(self.goodput_window_ms > 0.0) || !(self.tick_ms > 0.0) || !(self.drain_ms >= 0.0) {
            return bad("goodput_window_ms and tick_ms must be positive, drain_ms non-negative".into());
        }
        if self.metrics.len() != profiles.metric_count() {
            return bad(format!(
                "{} metric names for profiles with {} metrics",
                self.metrics.len(),
                profiles.metric_count()
            ));
        }
        let s = &self.scheduler;
        if s.concurrency_limit == 0 || s.static_cap == 0 || s.reactive.global_limit == 0 {
            return bad("concurrency limits must be positive".into());
        }
        if !(0.0..=1.0).contains(&s.meet_fraction) {
            return bad("meet_fraction must be within [0, 1]".into());
        }
        let a = &s.aimd;
        if !(a.floor <= a.ceiling && a.increase >= 0.0 && a.tick > 0.0) {
            return bad("aimd needs floor <= ceiling, increase >= 0 and tick > 0".into());
        }
        let r = &s.reactive;
        if !(1 <= r.min_allowance && r.min_allowance <= r.default_allowance && r.reset_period > 0.0) {
            return bad("reactive allowance bounds are inconsistent".into());
        }
        self.ground_truth.validate(profiles.metric_count())?;
        if let Some(shift) = &self.ground_truth_shift {
            shift.params.validate(profiles.metric_count())?;
        }
        if let Some(p) = &self.profile_perturbation {
            if !(0.0..=100.0).contains(&p.magnitude_percent) {
                return bad("perturbation magnitude must be within [0, 100]".into());
            }
        }
        if let Some(init) = &self.predictor.initial {
            if init.w.len() != profiles.metric_count() {
                return bad("predictor.initial has the wrong number of metric weights".into());
            }
            if !(init.b > 1.0 && init.k > 0.0) {
                return bad("predictor.initial needs b > 1 and k > 0".into());
            }
        }
        if !(self.predictor.huber_delta > 0.0 && self.predictor.effect_cap > 0.0) {
            return bad("predictor huber_delta and effect_cap must be positive".into());
        }
        for st in &self.workload {
            if profiles.index_of(&st.model).is_none() {
                return bad(format!("workload names unknown model {}", st.model));
            }
            match &st.mode {
                ArrivalMode::Poisson { rate } | ArrivalMode::Uniform { rate } if !(*rate >= 0.0 && rate.is_finite()) => {
                    return bad(format!("rate of {} must be non-negative", st.model));
                }
                ArrivalMode::Trace { scale, .. } if !(*scale > 0.0) => {
                    return bad(format!("trace scale of {} must be positive", st.model));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::overload(4);
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_config() {
        let cfg = ExperimentConfig::parse(
            r#"
seed = 3
policy = "temporal"
[[workload]]
model = "resnet50"
mode = "uniform"
rate = 10.0
"#,
        )
        .unwrap();
        assert_eq!(cfg.policy, PolicyKind::Temporal);
        assert_eq!(cfg.num_gpus, 4);
        assert!(cfg.validate(&cfg.profiles().unwrap()).is_ok());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ExperimentConfig::parse("sed = 3").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let set = builtin_profile_set();
        let mut cfg = ExperimentConfig::overload(0);
        cfg.num_gpus = 0;
        assert!(cfg.validate(&set).is_err());
        let mut cfg = ExperimentConfig::overload(0);
        cfg.ground_truth.beta = 0.5;
        assert!(matches!(cfg.validate(&set), Err(ConfigError::GroundTruth(_))));
        let mut cfg = ExperimentConfig::overload(0);
        cfg.workload[0].model = "nope".into();
        assert!(cfg.validate(&set).is_err());
    }
}
