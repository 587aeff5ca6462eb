//! Training-cost records.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::training::TrainReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub wall_time_total: f64,
    pub wall_time_per_epoch: Vec<f64>,
    pub peak_memory_bytes: usize,
    /// 1-based; 0 for a run with no epochs.
    pub epochs_to_converge: usize,
}

impl CostRecord {
    pub fn from_report(report: &TrainReport) -> Self {
        let per_epoch = report.wall_time_per_epoch();
        CostRecord {
            wall_time_total: per_epoch.iter().sum(),
            epochs_to_converge: epochs_to_converge(&report.train_losses()),
            wall_time_per_epoch: per_epoch,
            peak_memory_bytes: report.peak_memory_bytes,
        }
    }

    pub fn mean_epoch_time(&self) -> f64 {
        if self.wall_time_per_epoch.is_empty() {
            0.0
        } else {
            self.wall_time_total / self.wall_time_per_epoch.len() as f64
        }
    }
}

/// Mean of the last `max(1, ceil(E/10))` losses.
pub fn plateau(losses: &[f64]) -> Option<f64> {
    if losses.is_empty() {
        return None;
    }
    let tail = losses.len().div_ceil(10).max(1);
    let t = &losses[losses.len() - tail..];
    Some(t.iter().sum::<f64>() / t.len() as f64)
}

/// First epoch (1-based) whose loss is within 1% of the plateau or below it.
pub fn epochs_to_converge(losses: &[f64]) -> usize {
    let Some(p) = plateau(losses) else {
        return 0;
    };
    let band = 0.01 * p.abs();
    losses
        .iter()
        .position(|&l| l <= p + band)
        .map_or(losses.len(), |i| i + 1)
}

/// Runs `f` and wraps its report into a cost record.
pub fn measure_cost<F>(f: F) -> Result<(TrainReport, CostRecord)>
where
    F: FnOnce() -> Result<TrainReport>,
{
    let report = f()?;
    let cost = CostRecord::from_report(&report);
    Ok((report, cost))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_epoch() {
        assert_eq!(epochs_to_converge(&[]), 0);
        let l = [2.0, 1.0, 0.5, 0.3, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2];
        assert_eq!(epochs_to_converge(&l), 5);
        // oscillation around the plateau counts from the first crossing
        let l = [2.3, 1.1, 0.98, 1.02, 0.99, 1.01, 1.0, 0.99, 1.0, 1.0];
        assert_eq!(epochs_to_converge(&l), 3);
    }
}
