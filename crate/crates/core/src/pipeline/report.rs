//! Structured run reports.
//!
//! Every metric carries its seed count and standard deviation. Wall-clock
//! quantities live in dedicated fields so reproducibility checks can compare
//! everything else bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub std: f64,
    pub n_seeds: usize,
    /// The raw per-seed values behind the aggregate, in seed order.
    pub per_seed: Vec<f64>,
}

impl Metric {
    /// Mean and sample standard deviation over per-seed values.
    pub fn aggregate(name: &str, per_seed: &[f64]) -> Metric {
        let n = per_seed.len();
        let mean = per_seed.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Metric {
            name: name.to_string(),
            value: mean,
            std,
            n_seeds: n,
            per_seed: per_seed.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Deterministic metrics (reproduce bit-exactly for a fixed config).
    pub metrics: Vec<Metric>,
    /// Wall-clock measurements (latency and friends); excluded from
    /// reproducibility comparisons.
    pub timing_metrics: Vec<Metric>,
    pub phase_timings: Vec<PhaseTiming>,
    pub verdicts: Vec<Verdict>,
}

impl RunReport {
    pub fn metric(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn timing_metric(&self, name: &str) -> Option<&Metric> {
        self.timing_metrics.iter().find(|m| m.name == name)
    }

    pub fn all_verdicts_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: 0,
            message: e.to_string(),
        })
    }

    /// The report with all wall-clock fields stripped; two runs of the same
    /// config and seeds must agree exactly on this view.
    pub fn deterministic_view(&self) -> RunReport {
        let mut view = self.clone();
        view.timing_metrics.clear();
        view.phase_timings.clear();
        view
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_mean_and_std() {
        let m = Metric::aggregate("x", &[1.0, 2.0, 3.0]);
        assert_eq!(m.value, 2.0);
        assert!((m.std - 1.0).abs() < 1e-12);
        assert_eq!(m.n_seeds, 3);
        let single = Metric::aggregate("y", &[5.0]);
        assert_eq!(single.std, 0.0);
        assert_eq!(single.n_seeds, 1);
    }
}
