//! Experiment driver: parallel ticket searches with a resumable run log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use ticketforge::metrics::ExperimentSummary;
use ticketforge::nn::{DatasetSplits, NetworkSpec};
use ticketforge::rng::derive_seed;
use ticketforge::ticket_search::{identify_winning_tickets, run_ticket_search_with, RunRecord, RunStatus, StageEvent, WinningTickets};
use ticketforge::RngState;

use crate::checkpoint::{checkpoint_path, Checkpoint, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::{provision_dataset, DatasetError};
use crate::records::{read_runs, RecordError, RunLine};
use crate::reports::{emit_reports, write_summary, ReportError};

pub const RUNS_FILE: &str = "runs.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
/// Stream of the master seed used to generate and split the dataset.
pub const DATA_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{0} is locked by another process (remove {1} if it is stale)")]
    Locked(PathBuf, PathBuf),
    #[error("{dir} holds results of config {found}, this config is {expected}")]
    MixedConfig { dir: PathBuf, found: String, expected: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Reports(#[from] ReportError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchEntry {
    pub name: String,
    pub params: usize,
}

/// Written once per artifact directory; ties it to one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_digest: String,
    pub k: usize,
    pub n_runs: usize,
    pub master_seed: u64,
    pub architectures: Vec<ArchEntry>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, RunnerError> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes).map_err(|source| RunnerError::Json { path, source })
    }
}

/// Exclusive ownership of an artifact directory for the guard's lifetime.
pub struct DirLock(PathBuf);

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, RunnerError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunnerError::Locked(dir.to_path_buf(), path)),
            Err(source) => Err(RunnerError::Io { path, source }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; falls back to the config, then to available cores.
    pub jobs: Option<usize>,
    /// Discard runs.jsonl instead of skipping recorded runs.
    pub no_resume: bool,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub n_total: usize,
    pub n_failed: usize,
    /// Runs executed by this invocation (excludes resumed ones).
    pub executed: usize,
    pub summaries: Vec<ExperimentSummary>,
}

impl ExperimentOutcome {
    pub fn all_failed(&self) -> bool {
        self.n_total > 0 && self.n_failed == self.n_total
    }
}

/// One scheduled ticket search.
#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub run_id: u64,
    pub seed: u64,
    pub arch_index: usize,
}

/// Run ids are `arch_index * n_runs + i`; each run's seed is derived from the
/// master seed and its id only.
pub fn plan(cfg: &ExperimentConfig, n_archs: usize) -> Vec<PlannedRun> {
    (0..n_archs)
        .flat_map(|a| (0..cfg.n_runs).map(move |i| (a, (a * cfg.n_runs + i) as u64)))
        .map(|(arch_index, run_id)| PlannedRun { run_id, seed: derive_seed(cfg.master_seed, run_id), arch_index })
        .collect()
}

fn execute(
    cfg: &ExperimentConfig,
    dir: &Path,
    name: &str,
    spec: &NetworkSpec,
    splits: &DatasetSplits,
    digest: &str,
    run: &PlannedRun,
) -> Result<RunLine, RunnerError> {
    let mut ck_err = None;
    let mut observer = |ev: &StageEvent<'_>| {
        if cfg.save_checkpoints && ck_err.is_none() {
            let ck = Checkpoint::new(run.run_id, run.seed, ev.k, spec, ev.trained, ev.mask);
            ck_err = ck.save(&checkpoint_path(dir, run.run_id, ev.k)).err();
        }
    };
    let record = run_ticket_search_with(spec, splits, &cfg.ticket_search(), run.run_id, run.seed, &mut observer)
        .unwrap_or_else(|e| RunRecord {
            run_id: run.run_id,
            seed: run.seed,
            stages: Vec::new(),
            mask_digests: Vec::new(),
            status: RunStatus::Failed { stage: 0, reason: e.to_string() },
        });
    if let Some(e) = ck_err {
        return Err(e.into());
    }
    let tickets = identify_winning_tickets(&record).unwrap_or(WinningTickets::NONE);
    Ok(RunLine::new(&record, tickets, name, spec.param_count(), digest))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Run (or resume) an experiment and write its summary and plot data.
///
/// `progress` is called once per finished run, from the writer thread.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    progress: &(dyn Fn(&RunLine) + Sync),
) -> Result<ExperimentOutcome, RunnerError> {
    let dir = cfg.output_path();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let _lock = DirLock::acquire(&dir)?;

    let digest = cfg.digest();
    let networks = cfg.networks()?;
    let manifest = Manifest {
        name: cfg.name.clone(),
        config_digest: digest.clone(),
        k: cfg.search.k,
        n_runs: cfg.n_runs,
        master_seed: cfg.master_seed,
        architectures: networks.iter().map(|(n, s)| ArchEntry { name: n.clone(), params: s.param_count() }).collect(),
        config: serde_json::to_value(cfg).expect("config serializes"),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let found = Manifest::load(&dir)?;
        if found.config_digest != digest {
            return Err(RunnerError::MixedConfig { dir, found: found.config_digest, expected: digest });
        }
    }
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;

    let runs_path = dir.join(RUNS_FILE);
    let existing = if opts.no_resume {
        File::create(&runs_path).map_err(io_err(&runs_path))?;
        Default::default()
    } else {
        read_runs(&runs_path, cfg.search.k)?
    };
    if let Some(bad) = existing.lines.iter().find(|l| l.config_digest != digest) {
        return Err(RunnerError::MixedConfig { dir, found: bad.config_digest.clone(), expected: digest });
    }
    if existing.truncated_tail {
        let f = OpenOptions::new().write(true).open(&runs_path).map_err(io_err(&runs_path))?;
        f.set_len(existing.valid_len).map_err(io_err(&runs_path))?;
        f.sync_all().map_err(io_err(&runs_path))?;
    }
    let done: std::collections::HashSet<u64> = existing.lines.iter().map(|l| l.run_id).collect();
    let todo: Vec<PlannedRun> = plan(cfg, networks.len()).into_iter().filter(|r| !done.contains(&r.run_id)).collect();

    let executed = todo.len();
    if !todo.is_empty() {
        let splits = provision_dataset(&cfg.dataset, &mut RngState::with_stream(cfg.master_seed, DATA_STREAM))?;
        let jobs = opts
            .jobs
            .or(cfg.jobs)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| RunnerError::Pool(e.to_string()))?;
        let mut log = OpenOptions::new().create(true).append(true).open(&runs_path).map_err(io_err(&runs_path))?;
        let (tx, rx) = mpsc::channel::<RunLine>();
        std::thread::scope(|scope| {
            let writer = scope.spawn(|| -> Result<(), RunnerError> {
                for line in rx {
                    let mut bytes = serde_json::to_vec(&line).expect("run line serializes");
                    bytes.push(b'\n');
                    log.write_all(&bytes).map_err(io_err(&runs_path))?;
                    log.sync_data().map_err(io_err(&runs_path))?;
                    progress(&line);
                }
                Ok(())
            });
            let worked = pool.install(|| {
                todo.par_iter().try_for_each_with(tx, |tx, run| {
                    let (name, spec) = &networks[run.arch_index];
                    let line = execute(cfg, &dir, name, spec, &splits, &digest, run)?;
                    // A closed channel means the writer failed; its error is reported below.
                    let _ = tx.send(line);
                    Ok::<(), RunnerError>(())
                })
            });
            let written = writer.join().expect("writer thread panicked");
            worked.and(written)
        })?;
    }

    // Canonical order so the log is identical however the runs were scheduled.
    let mut lines = read_runs(&runs_path, cfg.search.k)?.lines;
    lines.sort_by_key(|l| l.run_id);
    lines.dedup_by_key(|l| l.run_id);
    let mut bytes = Vec::new();
    for l in &lines {
        serde_json::to_writer(&mut bytes, l).expect("run line serializes");
        bytes.push(b'\n');
    }
    write_atomic(&runs_path, &bytes)?;

    let summaries = write_summary(&dir, &lines)?;
    emit_reports(&dir, &lines)?;
    Ok(ExperimentOutcome {
        n_total: lines.len(),
        n_failed: lines.iter().filter(|l| !l.is_complete()).count(),
        executed,
        summaries,
        dir,
    })
}

/// Load and validate the run log of an artifact directory.
pub fn load_runs(dir: &Path) -> Result<Vec<RunLine>, RunnerError> {
    let manifest = Manifest::load(dir)?;
    let mut lines = read_runs(&dir.join(RUNS_FILE), manifest.k)?.lines;
    if let Some(bad) = lines.iter().find(|l| l.config_digest != manifest.config_digest) {
        return Err(RunnerError::MixedConfig {
            dir: dir.to_path_buf(),
            found: bad.config_digest.clone(),
            expected: manifest.config_digest,
        });
    }
    lines.sort_by_key(|l| l.run_id);
    Ok(lines)
}
