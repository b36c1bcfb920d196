//! Experiment harness: configuration, datasets, the parallel run driver and
//! report emission.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod records;
pub mod reports;
pub mod runner;

use records::RunLine;
use reports::{group_by_arch, summaries, ReportError};

/// `(architecture, params, lts_score)` sorted by descending LTS; architectures
/// without a completed run score 0.
pub fn lts_ordering(lines: &[RunLine]) -> Result<Vec<(String, usize, f64)>, ReportError> {
    let groups = group_by_arch(lines)?;
    let sums = summaries(&groups)?;
    let mut out: Vec<(String, usize, f64)> = groups
        .iter()
        .map(|g| {
            let lts = sums.iter().find(|s| s.architecture == g.name).map_or(0.0, |s| s.lts_score);
            (g.name.clone(), g.params, lts)
        })
        .collect();
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.1.cmp(&b.1)));
    Ok(out)
}
