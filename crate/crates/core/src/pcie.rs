//! Upstream (host-to-device) transfer contention: one FIFO link per GPU.

use std::collections::VecDeque;

use thiserror::Error;

use crate::model::Millis;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PcieError {
    #[error("transfer duration must be positive, got {0}")]
    NonPositiveTransfer(Millis),
    #[error("no pending reservation to calibrate")]
    NoPendingReservation,
}

/// Predicted state of a GPU's upstream link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PcieLinkState {
    /// When the link next becomes free.
    pub t_available: Millis,
    /// Predicted end times of reservations whose transfer has not finished,
    /// oldest first.
    pending: VecDeque<Millis>,
}

/// A granted slot on the link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reservation {
    pub start: Millis,
    pub end: Millis,
}

impl PcieLinkState {
    pub fn new(t_available: Millis) -> Self {
        Self {
            t_available,
            pending: VecDeque::new(),
        }
    }

    /// `max(0, t_available - t_current)`.
    pub fn estimate_upstream_delay(&self, t_current: Millis) -> Millis {
        (self.t_available - t_current).max(0.0)
    }

    /// `t_available <- max(t_current, t_available) + t_htod`.
    pub fn reserve(&mut self, t_current: Millis, t_htod: Millis) -> Result<Reservation, PcieError> {
        if !(t_htod > 0.0) {
            return Err(PcieError::NonPositiveTransfer(t_htod));
        }
        let start = self.t_available.max(t_current);
        let end = start + t_htod;
        self.t_available = end;
        self.pending.push_back(end);
        Ok(Reservation { start, end })
    }

    /// Folds the measured end of the oldest pending transfer back into the
    /// prediction. If it was the latest reservation the link is free at the
    /// measured time; otherwise the error shifts every later reservation.
    pub fn calibrate(&mut self, actual_transfer_end: Millis) -> Result<(), PcieError> {
        let predicted = self.pending.pop_front().ok_or(PcieError::NoPendingReservation)?;
        if self.pending.is_empty() {
            self.t_available = actual_transfer_end;
        } else {
            let offset = actual_transfer_end - predicted;
            for end in &mut self.pending {
                *end += offset;
            }
            self.t_available += offset;
        }
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }
}
