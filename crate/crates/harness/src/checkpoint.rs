//! Trained-stage checkpoints and one-off trajectory measurement.

use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use ticketforge::nn::{NetworkSpec, Parameters};
use ticketforge::pruning::{decode_mask, encode_mask, PruneError};
use ticketforge::ticket_search::{PROBE_STREAM, PROJECTION_STREAM};
use ticketforge::trajectory::{make_probe, measure, CircleProbe, Projection2D, TrajectoryError, TrajectoryResult};
use ticketforge::{MaskSet, RngState};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("mask is not valid base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("mask: {0}")]
    Mask(#[from] PruneError),
    #[error("checkpoint does not match its network: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub run_id: u64,
    pub seed: u64,
    pub stage: usize,
    pub spec: NetworkSpec,
    pub params: Parameters,
    /// Packed binary mask, base64.
    pub mask: String,
}

impl Checkpoint {
    pub fn new(run_id: u64, seed: u64, stage: usize, spec: &NetworkSpec, params: &Parameters, mask: &MaskSet) -> Self {
        Checkpoint {
            run_id,
            seed,
            stage,
            spec: spec.clone(),
            params: params.clone(),
            mask: base64::engine::general_purpose::STANDARD.encode(encode_mask(mask)),
        }
    }

    pub fn mask(&self) -> Result<MaskSet, CheckpointError> {
        let bytes = base64::engine::general_purpose::STANDARD.decode(&self.mask)?;
        let mask = decode_mask(&bytes)?;
        if mask.layers.iter().map(|l| l.shape.clone()).collect::<Vec<_>>() != self.spec.weight_shapes() {
            return Err(CheckpointError::Mismatch("mask shapes differ from the network's weights".into()));
        }
        Ok(mask)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let json = serde_json::to_vec(self).map_err(|source| CheckpointError::Json { path: path.to_path_buf(), source })?;
        std::fs::write(path, json).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Json { path: path.to_path_buf(), source })?;
        ck.params.check_matches(&ck.spec).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        ck.mask()?;
        Ok(ck)
    }

    /// Trajectory length under the probe and projection derived from `seed`.
    /// With the checkpoint's own seed and the run's probe settings this
    /// reproduces the length recorded for the stage.
    pub fn trajectory(&self, n_points: usize, radius: f64, seed: u64) -> Result<(CircleProbe, TrajectoryResult), CheckpointError> {
        let probe = make_probe(self.spec.input_len(), n_points, radius, &mut RngState::with_stream(seed, PROBE_STREAM))?;
        let proj = Projection2D::random(self.spec.num_classes(), &mut RngState::with_stream(seed, PROJECTION_STREAM))?;
        let result = measure(&self.spec, &self.params, &self.mask()?, &probe, &proj)?;
        Ok((probe, result))
    }
}

pub fn checkpoint_path(dir: &Path, run_id: u64, stage: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("run_{run_id:05}")).join(format!("stage_{stage}.json"))
}
