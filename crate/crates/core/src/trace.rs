//! Line-per-event simulation trace.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Millis, PriorityLevel};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed trace: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Arrival,
    Drop,
    Dispatch,
    KernelStart,
    KernelComplete,
    Complete,
    CapChange,
    Shift,
    End,
}

/// One trace row. Columns that do not apply to a kind are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: Millis,
    pub kind: TraceKind,
    pub gpu: Option<usize>,
    pub batch: Option<u64>,
    pub request: Option<u64>,
    pub model: Option<usize>,
    pub priority: Option<PriorityLevel>,
    pub size: Option<usize>,
    pub deadline: Option<Millis>,
    /// Start of the batch's upload on the GPU's link.
    pub transfer_start: Option<Millis>,
    /// Request latency, or batch latency on `kernel_complete`.
    pub latency: Option<Millis>,
    pub est_latency: Option<Millis>,
    /// Interference degree predicted at dispatch.
    pub intf_pred: Option<f64>,
    /// Prediction on the batch's measured co-location, before the update.
    pub intf_model: Option<f64>,
    /// Same, from the frozen snapshot taken at a parameter shift.
    pub intf_frozen: Option<f64>,
    pub kernel_measured: Option<Millis>,
    pub kernel_isol: Option<Millis>,
    /// ∫ 1/slowdown dt over the kernel interval.
    pub work_integral: Option<Millis>,
    pub c_low: Option<f64>,
}

impl TraceRecord {
    pub fn new(time: Millis, kind: TraceKind) -> Self {
        Self {
            time,
            kind,
            gpu: None,
            batch: None,
            request: None,
            model: None,
            priority: None,
            size: None,
            deadline: None,
            transfer_start: None,
            latency: None,
            est_latency: None,
            intf_pred: None,
            intf_model: None,
            intf_frozen: None,
            kernel_measured: None,
            kernel_isol: None,
            work_integral: None,
            c_low: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTrace {
    pub records: Vec<TraceRecord>,
}

impl EventTrace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Whether the run that produced the trace reached its end.
    pub fn is_complete(&self) -> bool {
        self.records.last().is_some_and(|r| r.kind == TraceKind::End)
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.serialize(TraceRecord::new(0.0, TraceKind::End)).expect("in-memory write");
            let bytes = w.into_inner().expect("in-memory write");
            let header_end = bytes.iter().position(|b| *b == b'\n').map_or(bytes.len(), |i| i + 1);
            return bytes[..header_end].to_vec();
        }
        for r in &self.records {
            w.serialize(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory write")
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self, TraceError> {
        let mut r = csv::Reader::from_reader(bytes);
        let records = r
            .deserialize()
            .collect::<Result<Vec<TraceRecord>, _>>()
            .map_err(|e| TraceError::Format(e.to_string()))?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_csv())
    }

    pub fn read(path: &Path) -> Result<Self, TraceError> {
        let bytes = fs::read(path).map_err(|e| TraceError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_csv(&bytes)
    }

    /// Hex SHA-256 of the CSV form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_csv());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
