//! Deadline- and priority-aware batch scheduling for multi-GPU inference
//! serving, with an interference predictor calibrated online and a
//! discrete-event simulator that stands in for the GPUs.

pub mod baselines;
pub mod config;
pub mod ground_truth;
pub mod metrics;
pub mod model;
pub mod pcie;
pub mod predictor;
pub mod profile;
pub mod scheduler;
pub mod sim;
pub mod trace;
pub mod workload;

pub use config::ExperimentConfig;
pub use ground_truth::GroundTruthParams;
pub use metrics::{compute_metrics, perturb_profiles, MetricsReport};
pub use model::{Batch, ModelProfile, PriorityLevel, Request};
pub use predictor::{Predictor, PredictorParams};
pub use profile::ProfileSet;
pub use scheduler::{Ablation, PolicyKind, Scheduler};
pub use sim::{run, SimOutput};
pub use trace::EventTrace;
