//! Ticket-search metrics and per-architecture aggregation.
//!
//! - success rate: `SR = N_success / N_total * 100`
//! - accuracy gain: `A_gain = (A_sparse - A_dense) / A_dense * 100`
//! - LTS score: `A_gain * SR / 100` (SR enters as a fraction)
//! - trajectory-length gain: `TL_gain = (TL_sparse - TL_dense) / TL_dense * 100`
//!
//! Gains are computed per run against that run's own dense model and only
//! then averaged.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::ticket_search::{RunRecord, WinningTickets};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("n_total must be at least 1")]
    ZeroTotal,
    #[error("n_success {n_success} exceeds n_total {n_total}")]
    SuccessExceedsTotal { n_success: usize, n_total: usize },
    #[error("baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("no completed runs to summarize")]
    NoCompletedRuns,
    #[error("run {run_id}: winning stage {stage} missing from the record")]
    MissingStage { run_id: u64, stage: usize },
}

pub fn success_rate(n_success: usize, n_total: usize) -> Result<f64, MetricsError> {
    if n_total == 0 {
        return Err(MetricsError::ZeroTotal);
    }
    if n_success > n_total {
        return Err(MetricsError::SuccessExceedsTotal { n_success, n_total });
    }
    Ok(n_success as f64 / n_total as f64 * 100.0)
}

fn relative_gain(sparse: f64, dense: f64) -> Result<f64, MetricsError> {
    if !(dense > 0.0) {
        return Err(MetricsError::NonPositiveBaseline(dense));
    }
    Ok((sparse - dense) / dense * 100.0)
}

pub fn accuracy_gain(a_sparse: f64, a_dense: f64) -> Result<f64, MetricsError> {
    relative_gain(a_sparse, a_dense)
}

pub fn tl_gain(tl_sparse: f64, tl_dense: f64) -> Result<f64, MetricsError> {
    relative_gain(tl_sparse, tl_dense)
}

/// `a_gain_pct * success_rate_pct / 100`. Not clamped: a negative gain gives a
/// negative score.
pub fn lts_score(a_gain_pct: f64, success_rate_pct: f64) -> f64 {
    debug_assert!((0.0..=100.0).contains(&success_rate_pct));
    a_gain_pct * (success_rate_pct / 100.0)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregateStat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl AggregateStat {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), n: values.len() })
    }

    fn zero(n: usize) -> Self {
        Self { mean: 0.0, std: 0.0, n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Variant {
    Dense,
    BestSparse,
    SparsestMatching,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Dense => "Dense",
            Variant::BestSparse => "BestSparse",
            Variant::SparsestMatching => "SparsestMatching",
        }
    }
}

/// One summary row. Accuracies are in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub trajectory_length: AggregateStat,
    pub tl_gain_pct: AggregateStat,
    pub test_acc_pct: AggregateStat,
    pub acc_gain_pct: AggregateStat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub architecture: String,
    pub n_total: usize,
    pub n_completed: usize,
    pub n_success: usize,
    /// Dense first, then sparse variants when at least one run succeeded.
    pub variants: Vec<VariantSummary>,
    pub success_rate_pct: f64,
    pub lts_score: f64,
}

impl ExperimentSummary {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }

    /// Mean Best-Sparse accuracy gain, 0 when no run succeeded.
    pub fn mean_acc_gain_pct(&self) -> f64 {
        self.variant(Variant::BestSparse).map_or(0.0, |v| v.acc_gain_pct.mean)
    }
}

#[derive(Default)]
struct Columns {
    tl: Vec<f64>,
    tl_gain: Vec<f64>,
    acc: Vec<f64>,
    acc_gain: Vec<f64>,
}

impl Columns {
    fn into_summary(self, variant: Variant) -> Option<VariantSummary> {
        Some(VariantSummary {
            variant,
            trajectory_length: AggregateStat::from_values(&self.tl)?,
            tl_gain_pct: AggregateStat::from_values(&self.tl_gain)?,
            test_acc_pct: AggregateStat::from_values(&self.acc)?,
            acc_gain_pct: AggregateStat::from_values(&self.acc_gain)?,
        })
    }
}

/// Aggregate the runs of one architecture.
///
/// SR counts every attempted run (failed runs included). The Dense row
/// averages over completed runs; sparse rows average over successful runs
/// only. Runs are processed in `run_id` order, so the result does not depend
/// on the order of `runs`.
pub fn summarize(architecture: &str, runs: &[(RunRecord, WinningTickets)]) -> Result<ExperimentSummary, MetricsError> {
    let mut ordered: Vec<&(RunRecord, WinningTickets)> = runs.iter().collect();
    ordered.sort_by_key(|(r, _)| r.run_id);

    let n_total = ordered.len();
    let completed: Vec<_> = ordered.iter().filter(|(r, _)| r.is_complete() && !r.stages.is_empty()).collect();
    if completed.is_empty() {
        return Err(MetricsError::NoCompletedRuns);
    }
    let mut dense = Columns::default();
    let mut best = Columns::default();
    let mut sparsest = Columns::default();
    let mut n_success = 0;
    for (run, tickets) in &completed {
        let d = &run.stages[0];
        dense.tl.push(d.trajectory_length);
        dense.tl_gain.push(0.0);
        dense.acc.push(d.test_acc * 100.0);
        dense.acc_gain.push(0.0);
        if !tickets.success {
            continue;
        }
        n_success += 1;
        for (stage, cols) in [(tickets.best_sparse, &mut best), (tickets.sparsest_matching, &mut sparsest)] {
            let k = stage.ok_or(MetricsError::MissingStage { run_id: run.run_id, stage: usize::MAX })?;
            let s = run.stages.get(k).ok_or(MetricsError::MissingStage { run_id: run.run_id, stage: k })?;
            cols.tl.push(s.trajectory_length);
            cols.tl_gain.push(tl_gain(s.trajectory_length, d.trajectory_length)?);
            cols.acc.push(s.test_acc * 100.0);
            cols.acc_gain.push(accuracy_gain(s.test_acc, d.test_acc)?);
        }
    }
    let sr = success_rate(n_success, n_total)?;
    let mut variants = Vec::new();
    let mut dense_row = dense.into_summary(Variant::Dense).expect("at least one completed run");
    // Exact zeros regardless of summation.
    dense_row.tl_gain_pct = AggregateStat::zero(completed.len());
    dense_row.acc_gain_pct = AggregateStat::zero(completed.len());
    variants.push(dense_row);
    variants.extend(best.into_summary(Variant::BestSparse));
    variants.extend(sparsest.into_summary(Variant::SparsestMatching));
    let mean_gain = variants.iter().find(|v| v.variant == Variant::BestSparse).map_or(0.0, |v| v.acc_gain_pct.mean);
    Ok(ExperimentSummary {
        architecture: architecture.to_string(),
        n_total,
        n_completed: completed.len(),
        n_success,
        variants,
        success_rate_pct: sr,
        lts_score: lts_score(mean_gain, sr),
    })
}

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "architecture",
    "variant",
    "tl_mean",
    "tl_std",
    "tl_gain_mean",
    "tl_gain_std",
    "acc_mean",
    "acc_std",
    "acc_gain_mean",
    "acc_gain_std",
    "sr_pct",
    "lts_score",
    "n",
];

/// Write summary rows. Accuracies are percentages; `n` is the number of
/// runs averaged in that row (completed runs for Dense, successful runs for
/// the sparse variants).
pub fn write_summary_csv<W: Write>(summaries: &[ExperimentSummary], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for s in summaries {
        for v in &s.variants {
            w.write_record([
                s.architecture.clone(),
                v.variant.as_str().to_string(),
                v.trajectory_length.mean.to_string(),
                v.trajectory_length.std.to_string(),
                v.tl_gain_pct.mean.to_string(),
                v.tl_gain_pct.std.to_string(),
                v.test_acc_pct.mean.to_string(),
                v.test_acc_pct.std.to_string(),
                v.acc_gain_pct.mean.to_string(),
                v.acc_gain_pct.std.to_string(),
                s.success_rate_pct.to_string(),
                s.lts_score.to_string(),
                v.test_acc_pct.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
