//! Defects-per-interval counting for stress runs.

use serde::{Deserialize, Serialize};

use crate::domain::Tick;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReliabilityError {
    #[error("invalid window: {0}")]
    InvalidWindow(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityEstimate {
    pub intervals: u64,
    pub defects_per_interval: Vec<u64>,
    /// Mean defects per interval (λ).
    pub failure_intensity: f64,
    /// Probability of an interval without failure, `e^(-λ)`.
    pub reliability_one_interval: f64,
}

impl ReliabilityEstimate {
    pub fn total_defects(&self) -> u64 {
        self.defects_per_interval.iter().sum()
    }
}

/// Splits `[run_start, run_end]` into `intervals` equal windows and counts
/// the defects in each. Windows are half-open except the last, which also
/// holds `run_end`; a tick on a boundary belongs to the later window.
pub fn estimate(
    defect_ticks: &[Tick],
    run_start: Tick,
    run_end: Tick,
    intervals: u64,
) -> Result<ReliabilityEstimate, ReliabilityError> {
    if intervals == 0 {
        return Err(ReliabilityError::InvalidWindow(
            "interval count must be positive".into(),
        ));
    }
    if run_end <= run_start {
        return Err(ReliabilityError::InvalidWindow(format!(
            "run end {run_end} is not after run start {run_start}"
        )));
    }
    let span = u128::from(run_end - run_start);
    let mut counts = vec![0u64; intervals as usize];
    for &t in defect_ticks {
        if t < run_start || t > run_end {
            return Err(ReliabilityError::InvalidWindow(format!(
                "defect tick {t} outside [{run_start}, {run_end}]"
            )));
        }
        // floor((t - start) * k / span) in exact integer arithmetic
        let idx = (u128::from(t - run_start) * u128::from(intervals) / span) as usize;
        counts[idx.min(intervals as usize - 1)] += 1;
    }
    let total: u64 = counts.iter().sum();
    let lambda = total as f64 / intervals as f64;
    Ok(ReliabilityEstimate {
        intervals,
        defects_per_interval: counts,
        failure_intensity: lambda,
        reliability_one_interval: (-lambda).exp(),
    })
}
