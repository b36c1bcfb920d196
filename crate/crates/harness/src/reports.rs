//! Summary table and plot-data CSVs computed from run lines.

use std::path::{Path, PathBuf};

use thiserror::Error;
use ticketforge::metrics::{self, AggregateStat, ExperimentSummary, MetricsError};

use crate::records::RunLine;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SR_FILE: &str = "sr_by_arch.csv";
pub const ACC_GAIN_FILE: &str = "acc_gain_by_arch.csv";
pub const LTS_FILE: &str = "lts_by_arch.csv";
pub const TL_STAGE_FILE: &str = "tl_gain_by_stage.csv";
pub const REPORT_FILES: [&str; 4] = [SR_FILE, ACC_GAIN_FILE, LTS_FILE, TL_STAGE_FILE];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no runs recorded")]
    Empty,
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("architecture `{arch}`: {source}")]
    Metrics { arch: String, source: MetricsError },
    #[error("architecture `{0}` is recorded with differing parameter counts")]
    InconsistentArch(String),
}

/// Runs of one architecture, in run_id order.
#[derive(Debug, Clone)]
pub struct ArchRuns<'a> {
    pub name: String,
    pub params: usize,
    pub runs: Vec<&'a RunLine>,
}

impl ArchRuns<'_> {
    pub fn n_success(&self) -> usize {
        self.runs.iter().filter(|r| r.is_complete() && r.success).count()
    }
}

/// Group lines by architecture, ordered by ascending parameter count (then name).
pub fn group_by_arch(lines: &[RunLine]) -> Result<Vec<ArchRuns<'_>>, ReportError> {
    if lines.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut groups: Vec<ArchRuns> = Vec::new();
    for line in lines {
        match groups.iter_mut().find(|g| g.name == line.arch) {
            Some(g) if g.params != line.arch_params => return Err(ReportError::InconsistentArch(line.arch.clone())),
            Some(g) => g.runs.push(line),
            None => groups.push(ArchRuns { name: line.arch.clone(), params: line.arch_params, runs: vec![line] }),
        }
    }
    for g in &mut groups {
        g.runs.sort_by_key(|r| r.run_id);
    }
    groups.sort_by(|a, b| a.params.cmp(&b.params).then_with(|| a.name.cmp(&b.name)));
    Ok(groups)
}

/// Per-architecture summaries; architectures with no completed run are left out.
pub fn summaries(groups: &[ArchRuns<'_>]) -> Result<Vec<ExperimentSummary>, ReportError> {
    let mut out = Vec::new();
    for g in groups {
        let records: Vec<_> = g.runs.iter().map(|r| r.to_record()).collect();
        match metrics::summarize(&g.name, &records) {
            Ok(s) => out.push(s),
            Err(MetricsError::NoCompletedRuns) => {}
            Err(source) => return Err(ReportError::Metrics { arch: g.name.clone(), source }),
        }
    }
    Ok(out)
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<std::fs::File>, ReportError> {
    let path = dir.join(name);
    let f = std::fs::File::create(&path).map_err(|source| ReportError::Io { path, source })?;
    Ok(csv::Writer::from_writer(f))
}

pub fn write_summary(dir: &Path, lines: &[RunLine]) -> Result<Vec<ExperimentSummary>, ReportError> {
    let groups = group_by_arch(lines)?;
    let sums = summaries(&groups)?;
    let path = dir.join(SUMMARY_FILE);
    let f = std::fs::File::create(&path).map_err(|source| ReportError::Io { path, source })?;
    metrics::write_summary_csv(&sums, f)?;
    Ok(sums)
}

fn metric(arch: &str) -> impl Fn(MetricsError) -> ReportError + '_ {
    move |source| ReportError::Metrics { arch: arch.to_string(), source }
}

/// Write the four plot-data files.
///
/// * `sr_by_arch.csv`: success rate per architecture.
/// * `acc_gain_by_arch.csv`: Best Sparse accuracy gain of every successful run.
/// * `lts_by_arch.csv`: success rate, mean gain and LTS per architecture.
/// * `tl_gain_by_stage.csv`: trajectory-length gain per stage index over completed runs.
pub fn emit_reports(dir: &Path, lines: &[RunLine]) -> Result<(), ReportError> {
    let groups = group_by_arch(lines)?;
    let sums = summaries(&groups)?;

    let mut sr = writer(dir, SR_FILE)?;
    sr.write_record(["architecture", "params", "n_total", "n_success", "sr_pct"])?;
    let mut lts = writer(dir, LTS_FILE)?;
    lts.write_record(["architecture", "params", "sr_pct", "acc_gain_mean", "lts_score"])?;
    let mut acc = writer(dir, ACC_GAIN_FILE)?;
    acc.write_record(["architecture", "params", "run_id", "best_sparse_stage", "acc_gain_pct"])?;
    let mut tl = writer(dir, TL_STAGE_FILE)?;
    tl.write_record(["architecture", "params", "stage", "surviving_fraction", "tl_gain_mean", "tl_gain_std", "n"])?;

    for g in &groups {
        let params = g.params.to_string();
        let n_success = g.n_success();
        let sr_pct = metrics::success_rate(n_success, g.runs.len()).map_err(metric(&g.name))?;
        sr.write_record([g.name.clone(), params.clone(), g.runs.len().to_string(), n_success.to_string(), sr_pct.to_string()])?;

        let (gain, score) = match sums.iter().find(|s| s.architecture == g.name) {
            Some(s) => (s.mean_acc_gain_pct(), s.lts_score),
            None => (0.0, metrics::lts_score(0.0, sr_pct)),
        };
        lts.write_record([g.name.clone(), params.clone(), sr_pct.to_string(), gain.to_string(), score.to_string()])?;

        let complete: Vec<&RunLine> = g.runs.iter().copied().filter(|r| r.is_complete() && !r.stages.is_empty()).collect();
        for r in &complete {
            if let (true, Some(k)) = (r.success, r.best_sparse_stage) {
                let s = r.stages.get(k).ok_or(ReportError::Metrics {
                    arch: g.name.clone(),
                    source: MetricsError::MissingStage { run_id: r.run_id, stage: k },
                })?;
                let gain = metrics::accuracy_gain(s.test_acc, r.stages[0].test_acc).map_err(metric(&g.name))?;
                acc.write_record([g.name.clone(), params.clone(), r.run_id.to_string(), k.to_string(), gain.to_string()])?;
            }
        }

        let n_stages = complete.iter().map(|r| r.stages.len()).max().unwrap_or(0);
        for k in 0..n_stages {
            let mut gains = Vec::new();
            let mut fractions = Vec::new();
            for r in complete.iter().filter(|r| r.stages.len() > k) {
                let dense = r.stages[0].trajectory_length;
                gains.push(metrics::tl_gain(r.stages[k].trajectory_length, dense).map_err(metric(&g.name))?);
                fractions.push(r.stages[k].surviving_fraction);
            }
            let (Some(gs), Some(fs)) = (AggregateStat::from_values(&gains), AggregateStat::from_values(&fractions)) else {
                continue;
            };
            tl.write_record([
                g.name.clone(),
                params.clone(),
                k.to_string(),
                fs.mean.to_string(),
                gs.mean.to_string(),
                gs.std.to_string(),
                gs.n.to_string(),
            ])?;
        }
    }
    for mut w in [sr, lts, acc, tl] {
        w.flush().map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
    }
    Ok(())
}
