//! Profile files, the profile set of a run, and the synthetic profile generator.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::model::{validate_profile, Millis, ModelProfile, PriorityLevel, Violation};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path} violates profile rules: {}", list(.violations))]
    Invalid {
        path: String,
        violations: Vec<Violation>,
    },
    #[error("duplicate model id {0}")]
    Duplicate(String),
    #[error("profiles disagree on metric count ({0} vs {1})")]
    MetricCount(usize, usize),
    #[error("profile set is empty")]
    Empty,
}

fn list(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

pub fn parse_profile(text: &str, origin: &str) -> Result<ModelProfile, ProfileError> {
    let profile: ModelProfile = toml::from_str(text).map_err(|e| ProfileError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    validate_profile(&profile).map_err(|violations| ProfileError::Invalid {
        path: origin.to_string(),
        violations,
    })?;
    Ok(profile)
}

pub fn load_profile(path: &Path) -> Result<ModelProfile, ProfileError> {
    let text = fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_profile(&text, &path.display().to_string())
}

pub fn profile_to_toml(p: &ModelProfile) -> String {
    toml::to_string(p).expect("profiles always serialize")
}

/// The models of one run, addressed by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    profiles: Vec<ModelProfile>,
    by_id: HashMap<String, usize>,
}

impl ProfileSet {
    pub fn new(profiles: Vec<ModelProfile>) -> Result<Self, ProfileError> {
        if profiles.is_empty() {
            return Err(ProfileError::Empty);
        }
        let width = profiles[0].metric_count();
        let mut by_id = HashMap::new();
        for (i, p) in profiles.iter().enumerate() {
            validate_profile(p).map_err(|violations| ProfileError::Invalid {
                path: p.model_id.clone(),
                violations,
            })?;
            if p.metric_count() != width {
                return Err(ProfileError::MetricCount(width, p.metric_count()));
            }
            if by_id.insert(p.model_id.clone(), i).is_some() {
                return Err(ProfileError::Duplicate(p.model_id.clone()));
            }
        }
        Ok(Self { profiles, by_id })
    }

    /// Loads every `*.toml` file of a directory, ordered by file name.
    pub fn load_dir(dir: &Path) -> Result<Self, ProfileError> {
        let io = |source| ProfileError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        let profiles = paths
            .iter()
            .map(|p| load_profile(p))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(profiles)
    }

    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for p in &self.profiles {
            fs::write(dir.join(format!("{}.toml", p.model_id)), profile_to_toml(p))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn get(&self, model: usize) -> &ModelProfile {
        &self.profiles[model]
    }

    pub fn index_of(&self, model_id: &str) -> Option<usize> {
        self.by_id.get(model_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModelProfile> {
        self.profiles.iter()
    }

    pub fn as_slice(&self) -> &[ModelProfile] {
        &self.profiles
    }

    pub fn metric_count(&self) -> usize {
        self.profiles[0].metric_count()
    }

    pub fn into_vec(self) -> Vec<ModelProfile> {
        self.profiles
    }
}

/// Shape parameters for a synthetic model profile.
///
/// Latency grows linearly with batch size; throughput ramps toward a per-metric
/// peak and saturates. The self-compute and self-memory columns copy the
/// tensor-pipe and L2 metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticModel {
    pub model_id: String,
    pub priority: PriorityLevel,
    pub deadline: Millis,
    /// Batch formation timeout as a fraction of the deadline.
    pub timeout_fraction: f64,
    pub max_batch_size: usize,
    pub inf_base: Millis,
    pub inf_per_item: Millis,
    pub htod_fraction: f64,
    pub kernel_fraction: f64,
    /// Throughput at saturation, one entry per metric.
    pub peak: Vec<f64>,
    /// Batch size at which throughput reaches ~63% of peak.
    pub ramp: f64,
}

/// Index of the metric copied into `m_self_cmp` (tensor pipe).
pub const SELF_CMP_METRIC: usize = 3;
/// Index of the metric copied into `m_self_mem` (L2 cache).
pub const SELF_MEM_METRIC: usize = 1;

pub fn synthesize(m: &SyntheticModel) -> ModelProfile {
    let sizes = 1..=m.max_batch_size;
    let inf: Vec<f64> = sizes.clone().map(|j| m.inf_base + m.inf_per_item * j as f64).collect();
    let htod: Vec<f64> = inf.iter().map(|t| t * m.htod_fraction).collect();
    let kernel: Vec<f64> = inf.iter().map(|t| t * m.kernel_fraction).collect();
    let m_metric: Vec<Vec<f64>> = sizes
        .map(|j| {
            let fill = 1.0 - (-(j as f64) / m.ramp).exp();
            m.peak.iter().map(|p| (p * fill).clamp(0.0, 1.0)).collect()
        })
        .collect();
    let pick = |idx: usize| -> Vec<f64> {
        m_metric
            .iter()
            .map(|row| row.get(idx).or(row.last()).copied().unwrap_or(0.0))
            .collect()
    };
    ModelProfile {
        model_id: m.model_id.clone(),
        priority: m.priority,
        deadline: m.deadline,
        batch_timeout: m.deadline * m.timeout_fraction,
        max_batch_size: m.max_batch_size,
        m_self_cmp: pick(SELF_CMP_METRIC),
        m_self_mem: pick(SELF_MEM_METRIC),
        t_inf_isol: inf,
        t_htod_isol: htod,
        t_kernel_isol: kernel,
        m_metric,
    }
}

/// Six-model deployment: two high-priority vision models and four
/// low-priority models. Deadlines and priorities follow the reference
/// deployment; latencies and throughputs are synthetic.
pub fn builtin_models() -> Vec<SyntheticModel> {
    let model = |id: &str, priority, deadline, inf_base, inf_per_item, peak: [f64; 5]| SyntheticModel {
        model_id: id.to_string(),
        priority,
        deadline,
        timeout_fraction: 0.1,
        max_batch_size: 8,
        inf_base,
        inf_per_item,
        htod_fraction: 0.12,
        kernel_fraction: 0.8,
        peak: peak.to_vec(),
        ramp: 3.0,
    };
    use PriorityLevel::{High, Low};
    vec![
        model("resnet50", High, 8.0, 1.0, 0.35, [0.30, 0.28, 0.22, 0.38, 0.20]),
        model("vit_b16", High, 15.0, 2.0, 0.75, [0.26, 0.34, 0.28, 0.45, 0.22]),
        model("convnext_b", Low, 25.0, 2.4, 1.2, [0.32, 0.30, 0.30, 0.40, 0.26]),
        model("vgg19", Low, 25.0, 2.8, 1.3, [0.36, 0.28, 0.34, 0.48, 0.34]),
        model("yolov8n", Low, 20.0, 1.2, 0.55, [0.18, 0.16, 0.14, 0.20, 0.16]),
        model("roberta_b", Low, 45.0, 3.0, 1.8, [0.34, 0.42, 0.46, 0.36, 0.18]),
    ]
}

pub fn builtin_profiles() -> Vec<ModelProfile> {
    builtin_models().iter().map(synthesize).collect()
}

pub fn builtin_profile_set() -> ProfileSet {
    ProfileSet::new(builtin_profiles()).expect("builtin profiles are valid")
}

#[cfg(test)]
pub(crate) fn synthetic_model_strategy() -> impl proptest::strategy::Strategy<Value = SyntheticModel> {
    use proptest::prelude::*;
    (
        any::<bool>(),
        1usize..=16,
        0.1f64..10.0,
        0.01f64..5.0,
        0.0f64..0.3,
        0.3f64..0.69,
        prop::collection::vec(0.0f64..1.0, 1..8),
        0.5f64..8.0,
        0.0f64..0.5,
        1.01f64..3.0,
    )
        .prop_map(
            |(high, max_bs, base, per, htod, kernel, peak, ramp, timeout, slack)| SyntheticModel {
                model_id: "synthetic".into(),
                priority: if high { PriorityLevel::High } else { PriorityLevel::Low },
                deadline: (base + per) * slack,
                timeout_fraction: timeout,
                max_batch_size: max_bs,
                inf_base: base,
                inf_per_item: per,
                htod_fraction: htod.max(0.01),
                kernel_fraction: kernel,
                peak,
                ramp,
            },
        )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let p = builtin_profiles().remove(3);
        let text = profile_to_toml(&p);
        assert_eq!(parse_profile(&text, "mem").unwrap(), p);
    }

    #[test]
    fn unknown_field_is_parse_error() {
        let p = builtin_profiles().remove(0);
        let text = format!("{}\ncolour = \"red\"\n", profile_to_toml(&p));
        assert!(matches!(parse_profile(&text, "x"), Err(ProfileError::Parse { .. })));
    }

    #[test]
    fn malformed_is_parse_error_not_violation() {
        assert!(matches!(parse_profile("model_id = ", "x"), Err(ProfileError::Parse { .. })));
    }

    #[test]
    fn invalid_profile_is_violation() {
        let mut p = builtin_profiles().remove(0);
        p.m_self_mem[0] = 2.0;
        let text = profile_to_toml(&p);
        assert!(matches!(parse_profile(&text, "x"), Err(ProfileError::Invalid { .. })));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = builtin_profile_set();
        set.write_dir(dir.path()).unwrap();
        let back = ProfileSet::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), set.len());
        for p in set.iter() {
            assert_eq!(back.get(back.index_of(&p.model_id).unwrap()), p);
        }
    }

    #[test]
    fn builtin_deadlines() {
        let set = builtin_profile_set();
        let d: Vec<_> = set.iter().map(|p| (p.deadline, p.priority)).collect();
        assert_eq!(d[0], (8.0, PriorityLevel::High));
        assert_eq!(d[1], (15.0, PriorityLevel::High));
        assert_eq!(d[5], (45.0, PriorityLevel::Low));
        for p in set.iter() {
            assert!(p.inf(8) < p.deadline, "{} cannot fit a full batch", p.model_id);
        }
    }
}
