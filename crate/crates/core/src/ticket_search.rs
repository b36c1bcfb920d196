//! Iterative train → prune → rewind ticket search.
//!
//! ```text
//! theta_init <- init()
//! for k in 0..K:
//!     theta_k <- train(theta_init ⊙ prod_{i<k} M_i)
//!     M_k     <- lamp_prune(theta_k, prod_{i<k} M_i)
//! theta_K <- train(theta_init ⊙ prod_{i<K} M_i)
//! ```
//!
//! Stage 0 is the dense model. The extra final training step gives every one
//! of the K sparsity levels a measured accuracy, so a run records K + 1
//! trained models.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{evaluate_accuracy, init_kaiming_uniform, train_until_early_stop, DatasetSplits, NetworkSpec, NnError, Parameters, TrainConfig};
use crate::pruning::{apply_mask, compose_masks, lamp_scores, mask_chain_digests, select_prune, sparsity, MaskSet, PruneError};
use crate::rng::RngState;
use crate::trajectory::{make_probe, measure, Projection2D, TrajectoryError};

pub const INIT_STREAM: u64 = 0;
pub const PROBE_STREAM: u64 = 1;
pub const PROJECTION_STREAM: u64 = 2;
const TRAIN_STREAM_BASE: u64 = 16;

/// RNG used to initialise the network of a run.
pub fn init_rng(seed: u64) -> RngState {
    RngState::with_stream(seed, INIT_STREAM)
}

/// RNG driving the batch order while training stage `k`.
pub fn stage_rng(seed: u64, k: usize) -> RngState {
    RngState::with_stream(seed, TRAIN_STREAM_BASE + k as u64)
}

#[derive(Debug, Error)]
pub enum TicketSearchError {
    #[error("invalid ticket-search config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("run {0} is incomplete")]
    IncompleteRun(u64),
    #[error("mask product diverged from the latest cumulative mask at stage {0}")]
    MaskChainBroken(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_points: usize,
    pub radius: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { n_points: 1000, radius: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketSearchConfig {
    /// Number of prune stages.
    pub k: usize,
    pub prune_fraction: f64,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for TicketSearchConfig {
    fn default() -> Self {
        Self { k: 5, prune_fraction: 0.16, train: TrainConfig::default(), probe: ProbeConfig::default() }
    }
}

impl TicketSearchConfig {
    pub fn violations(&self, train_len: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        if self.k == 0 {
            out.push("k must be at least 1".into());
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            out.push(format!("prune_fraction must lie in (0, 1), got {}", self.prune_fraction));
        } else if (1.0 - self.prune_fraction).powi(self.k.min(i32::MAX as usize) as i32) <= 0.0 {
            out.push("(1 - prune_fraction)^k underflows to zero".into());
        }
        if self.probe.n_points < 3 {
            out.push(format!("probe n_points must be at least 3, got {}", self.probe.n_points));
        }
        if !(self.probe.radius > 0.0 && self.probe.radius.is_finite()) {
            out.push(format!("probe radius must be positive, got {}", self.probe.radius));
        }
        out.extend(self.train.violations(train_len));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub k: usize,
    pub surviving_fraction: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub trajectory_length: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { stage: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: u64,
    pub seed: u64,
    /// Dense stage first, then one stage per pruning round.
    pub stages: Vec<StageRecord>,
    /// Chained digests of the stage masks `M_0 .. M_{K-1}`.
    pub mask_digests: Vec<String>,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }
}

/// What a caller can see of each trained stage.
pub struct StageEvent<'a> {
    pub k: usize,
    pub init: &'a Parameters,
    /// Rewound parameters training started from.
    pub start: &'a Parameters,
    pub trained: &'a Parameters,
    /// Cumulative mask the stage was trained under.
    pub mask: &'a MaskSet,
    pub record: &'a StageRecord,
}

pub trait StageObserver {
    fn on_stage(&mut self, event: &StageEvent<'_>);
}

impl StageObserver for () {
    fn on_stage(&mut self, _: &StageEvent<'_>) {}
}

impl<F: FnMut(&StageEvent<'_>)> StageObserver for F {
    fn on_stage(&mut self, event: &StageEvent<'_>) {
        self(event)
    }
}

pub fn run_ticket_search(
    spec: &NetworkSpec,
    splits: &DatasetSplits,
    cfg: &TicketSearchConfig,
    run_id: u64,
    seed: u64,
) -> Result<RunRecord, TicketSearchError> {
    run_ticket_search_with(spec, splits, cfg, run_id, seed, &mut ())
}

/// Ticket search reporting every trained stage to `observer`.
///
/// A training divergence (non-finite activations) ends the run early with a
/// `Failed` status and the stages completed so far; configuration and shape
/// errors are returned as `Err`.
pub fn run_ticket_search_with(
    spec: &NetworkSpec,
    splits: &DatasetSplits,
    cfg: &TicketSearchConfig,
    run_id: u64,
    seed: u64,
    observer: &mut dyn StageObserver,
) -> Result<RunRecord, TicketSearchError> {
    let problems = cfg.violations(Some(splits.train.len()));
    if !problems.is_empty() {
        return Err(TicketSearchError::InvalidConfig(problems.join("; ")));
    }
    for (name, split) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if split.sample_shape != spec.input_shape() {
            return Err(NnError::ShapeMismatch(format!(
                "{name} samples {:?} vs network input {:?}",
                split.sample_shape,
                spec.input_shape()
            ))
            .into());
        }
    }

    let init = init_kaiming_uniform(spec, &mut init_rng(seed))?;
    let probe = make_probe(spec.input_len(), cfg.probe.n_points, cfg.probe.radius, &mut RngState::with_stream(seed, PROBE_STREAM))?;
    let proj = Projection2D::random(spec.num_classes(), &mut RngState::with_stream(seed, PROJECTION_STREAM))?;

    let mut history: Vec<MaskSet> = Vec::with_capacity(cfg.k);
    let mut cumulative = MaskSet::ones(spec);
    let mut stages = Vec::with_capacity(cfg.k + 1);
    let record = |stages: Vec<StageRecord>, history: &[MaskSet], status| RunRecord {
        run_id,
        seed,
        stages,
        mask_digests: mask_chain_digests(history),
        status,
    };

    for k in 0..=cfg.k {
        let start = apply_mask(&init, &cumulative)?;
        let trained = match train_until_early_stop(spec, &start, &cumulative, &splits.train, &splits.val, &cfg.train, &mut stage_rng(seed, k)) {
            Ok(out) => out,
            Err(e @ NnError::NumericalOverflow { .. }) => {
                return Ok(record(stages, &history, RunStatus::Failed { stage: k, reason: e.to_string() }));
            }
            Err(e) => return Err(e.into()),
        };
        let test_acc = evaluate_accuracy(spec, &trained.params, &cumulative, &splits.test)?;
        let tl = match measure(spec, &trained.params, &cumulative, &probe, &proj) {
            Ok(r) => r.length,
            Err(TrajectoryError::Network(e @ NnError::NumericalOverflow { .. })) => {
                return Ok(record(stages, &history, RunStatus::Failed { stage: k, reason: e.to_string() }));
            }
            Err(e) => return Err(e.into()),
        };
        let stage = StageRecord {
            k,
            surviving_fraction: sparsity(&cumulative),
            val_acc: trained.val_acc,
            test_acc,
            trajectory_length: tl,
            epochs: trained.epochs_run,
        };
        observer.on_stage(&StageEvent { k, init: &init, start: &start, trained: &trained.params, mask: &cumulative, record: &stage });
        stages.push(stage);

        if k == cfg.k {
            break;
        }
        let scores = lamp_scores(&trained.params, &cumulative)?;
        let stage_mask = select_prune(&scores, &cumulative, cfg.prune_fraction)?.mask;
        history.push(stage_mask);
        // Canonical form is the product of the whole history; with nested
        // stage masks it must equal the newest one.
        let product = compose_masks(spec, &history)?;
        if &product != history.last().unwrap() {
            return Err(TicketSearchError::MaskChainBroken(k));
        }
        cumulative = product;
    }
    Ok(record(stages, &history, RunStatus::Complete))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinningTickets {
    pub success: bool,
    pub best_sparse: Option<usize>,
    pub sparsest_matching: Option<usize>,
}

impl WinningTickets {
    pub const NONE: WinningTickets = WinningTickets { success: false, best_sparse: None, sparsest_matching: None };
}

/// Best Sparse and Sparsest Matching stages of a complete run, judged on test
/// accuracy against the run's own dense stage.
///
/// A sparse stage is a winning ticket when its test accuracy is at least the
/// dense accuracy. Best Sparse maximises test accuracy (ties go to the
/// sparser stage); Sparsest Matching minimises the surviving fraction among
/// winning stages (ties go to the later stage).
pub fn identify_winning_tickets(run: &RunRecord) -> Result<WinningTickets, TicketSearchError> {
    if !run.is_complete() || run.stages.len() < 2 {
        return Err(TicketSearchError::IncompleteRun(run.run_id));
    }
    let dense = run.stages[0].test_acc;
    let winners: Vec<&StageRecord> = run.stages[1..].iter().filter(|s| s.test_acc >= dense).collect();
    if winners.is_empty() {
        return Ok(WinningTickets::NONE);
    }
    let sparser = |a: &StageRecord, b: &StageRecord| {
        // true when a is strictly preferable to b on sparsity
        a.surviving_fraction < b.surviving_fraction || (a.surviving_fraction == b.surviving_fraction && a.k > b.k)
    };
    let mut best = winners[0];
    let mut sparsest = winners[0];
    for &s in &winners[1..] {
        if s.test_acc > best.test_acc || (s.test_acc == best.test_acc && sparser(s, best)) {
            best = s;
        }
        if sparser(s, sparsest) {
            sparsest = s;
        }
    }
    Ok(WinningTickets { success: true, best_sparse: Some(best.k), sparsest_matching: Some(sparsest.k) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_with(accs: &[f64]) -> RunRecord {
        let stages = accs
            .iter()
            .enumerate()
            .map(|(k, &a)| StageRecord {
                k,
                surviving_fraction: 0.84f64.powi(k as i32),
                val_acc: a,
                test_acc: a,
                trajectory_length: 1.0,
                epochs: 1,
            })
            .collect();
        RunRecord { run_id: 0, seed: 0, stages, mask_digests: vec![], status: RunStatus::Complete }
    }

    #[test]
    fn improving_then_dropping() {
        let t = identify_winning_tickets(&run_with(&[0.90, 0.91, 0.92, 0.89])).unwrap();
        assert_eq!(t, WinningTickets { success: true, best_sparse: Some(2), sparsest_matching: Some(2) });
    }

    #[test]
    fn all_below_dense() {
        let t = identify_winning_tickets(&run_with(&[0.90, 0.80, 0.85])).unwrap();
        assert_eq!(t, WinningTickets::NONE);
    }

    #[test]
    fn equality_counts_as_matching() {
        let t = identify_winning_tickets(&run_with(&[0.90, 0.85, 0.88, 0.90, 0.7])).unwrap();
        assert_eq!(t, WinningTickets { success: true, best_sparse: Some(3), sparsest_matching: Some(3) });
    }

    #[test]
    fn best_sparse_ties_go_sparser() {
        let t = identify_winning_tickets(&run_with(&[0.90, 0.95, 0.93, 0.95, 0.91, 0.5])).unwrap();
        assert_eq!(t.best_sparse, Some(3));
        assert_eq!(t.sparsest_matching, Some(4));
    }

    #[test]
    fn incomplete_run_rejected() {
        let mut r = run_with(&[0.9, 0.95]);
        r.status = RunStatus::Failed { stage: 1, reason: "x".into() };
        assert!(identify_winning_tickets(&r).is_err());
        assert!(identify_winning_tickets(&run_with(&[0.9])).is_err());
    }

    #[test]
    fn config_defaults_and_violations() {
        let cfg = TicketSearchConfig::default();
        assert_eq!((cfg.k, cfg.prune_fraction), (5, 0.16));
        assert!(cfg.violations(None).is_empty());
        let bad = TicketSearchConfig { k: 0, prune_fraction: 1.0, ..Default::default() };
        assert_eq!(bad.violations(None).len(), 2);
    }
}
