//! Open-loop arrival streams. Rates are in requests per second; timestamps
//! and durations are in milliseconds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Millis, Request};
use crate::profile::ProfileSet;

pub const MINUTE_MS: Millis = 60_000.0;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("rate must be non-negative and finite, got {0}")]
    BadRate(f64),
    #[error("trace scale must be positive, got {0}")]
    BadScale(f64),
    #[error("cannot read trace {path}: {message}")]
    Trace { path: String, message: String },
    #[error("function {function_id} not in trace; available: {}", available.join(", "))]
    MissingFunction {
        function_id: String,
        available: Vec<String>,
    },
    #[error("workload names unknown model {0}")]
    UnknownModel(String),
}

/// Arrival process of one model's stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ArrivalMode {
    Poisson { rate: f64 },
    Uniform { rate: f64 },
    Trace { file: PathBuf, function_id: String, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub model: String,
    #[serde(flatten)]
    pub mode: ArrivalMode,
}

/// Deterministic 64-bit mix of a seed and a salt.
pub fn sub_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Exponential inter-arrivals with mean `1/rate`, truncated at `duration`.
pub fn gen_poisson(rate: f64, duration: Millis, seed: u64) -> Result<Vec<Millis>, WorkloadError> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(WorkloadError::BadRate(rate));
    }
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    let exp = Exp::new(rate / 1000.0).expect("positive rate");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += exp.sample(&mut rng);
        if t >= duration {
            return Ok(out);
        }
        out.push(t);
    }
}

/// Arrivals at `k / rate` for `k = 0, 1, ...`, strictly below `duration`.
pub fn gen_uniform(rate: f64, duration: Millis) -> Result<Vec<Millis>, WorkloadError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(WorkloadError::BadRate(rate));
    }
    let gap = 1000.0 / rate;
    Ok((0u64..)
        .map(|k| k as f64 * gap)
        .take_while(|t| *t < duration)
        .collect())
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    function_id: String,
    minute_index: u64,
    count: u64,
}

/// Per-minute request counts of one function, keyed by minute index.
pub fn load_trace(path: &Path, function_id: &str) -> Result<BTreeMap<u64, u64>, WorkloadError> {
    let err = |message: String| WorkloadError::Trace {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut counts = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for row in reader.deserialize::<TraceRow>() {
        let row = row.map_err(|e| err(e.to_string()))?;
        if row.function_id == function_id {
            *counts.entry(row.minute_index).or_insert(0) += row.count;
        }
        seen.insert(row.function_id);
    }
    if !seen.contains(function_id) {
        return Err(WorkloadError::MissingFunction {
            function_id: function_id.to_string(),
            available: seen.into_iter().collect(),
        });
    }
    Ok(counts)
}

/// Expands per-minute counts into arrivals: each minute is an independent
/// Poisson process at `count * scale / 60` req/s, confined to that minute.
pub fn expand_trace(
    counts: &BTreeMap<u64, u64>,
    scale: f64,
    duration: Millis,
    seed: u64,
) -> Result<Vec<Millis>, WorkloadError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(WorkloadError::BadScale(scale));
    }
    let mut out = Vec::new();
    for (&minute, &count) in counts {
        let start = minute as f64 * MINUTE_MS;
        if start >= duration {
            break;
        }
        let rate = count as f64 * scale / 60.0;
        let span = MINUTE_MS.min(duration - start);
        out.extend(gen_poisson(rate, span, sub_seed(seed, minute))?.into_iter().map(|t| start + t));
    }
    Ok(out)
}

pub fn stream_arrivals(mode: &ArrivalMode, duration: Millis, seed: u64) -> Result<Vec<Millis>, WorkloadError> {
    match mode {
        ArrivalMode::Poisson { rate } => gen_poisson(*rate, duration, seed),
        ArrivalMode::Uniform { rate } => gen_uniform(*rate, duration),
        ArrivalMode::Trace {
            file,
            function_id,
            scale,
        } => expand_trace(&load_trace(file, function_id)?, *scale, duration, seed),
    }
}

/// Every stream merged into one request list ordered by arrival time, then
/// by model index. Request ids follow that order.
pub fn generate(
    streams: &[StreamSpec],
    profiles: &ProfileSet,
    duration: Millis,
    seed: u64,
) -> Result<Vec<Request>, WorkloadError> {
    let mut arrivals: Vec<(Millis, usize)> = Vec::new();
    for (i, s) in streams.iter().enumerate() {
        let model = profiles
            .index_of(&s.model)
            .ok_or_else(|| WorkloadError::UnknownModel(s.model.clone()))?;
        let times = stream_arrivals(&s.mode, duration, sub_seed(seed, i as u64))?;
        arrivals.extend(times.into_iter().map(|t| (t, model)));
    }
    arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(arrivals
        .into_iter()
        .enumerate()
        .map(|(id, (t, model))| Request::new(id as u64, model, t, profiles.get(model).deadline))
        .collect())
}

/// Poisson streams for every model of `profiles` at the given rates.
pub fn poisson_streams(profiles: &ProfileSet, rates: &[f64]) -> Vec<StreamSpec> {
    profiles
        .iter()
        .zip(rates)
        .map(|(p, &rate)| StreamSpec {
            model: p.model_id.clone(),
            mode: ArrivalMode::Poisson { rate },
        })
        .collect()
}
