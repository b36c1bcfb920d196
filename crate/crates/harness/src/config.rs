//! Experiment configuration (TOML) with a strict schema.
//!
//! Unknown keys are errors, reported with their line and the closest valid
//! key. Constraint violations are collected and reported together.

use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use ticketforge::nn::{Layer, NetworkSpec, TrainConfig};
use ticketforge::ticket_search::{ProbeConfig, TicketSearchConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: unknown key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey { key: String, line: usize, suggestion: Option<String>, expected: Vec<String> },
    #[error("{}parse error: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    TwoMoons,
    GaussianBlobs,
    MnistIdx,
    Cifar10Binary,
}

impl DataSource {
    pub fn is_file_backed(&self) -> bool {
        matches!(self, DataSource::MnistIdx | DataSource::Cifar10Binary)
    }
}

fn d_n_samples() -> usize {
    1000
}
fn d_noise() -> f64 {
    0.1
}
fn d_centers() -> usize {
    2
}
fn d_dim() -> usize {
    2
}
fn d_cluster_std() -> f64 {
    1.0
}
fn d_spread() -> f64 {
    4.0
}
fn d_val_fraction() -> f64 {
    0.1
}
fn d_test_fraction() -> f64 {
    0.2
}

/// Where the samples come from and how they are split.
///
/// Synthetic sources use `n_samples` and carve test then validation sets out
/// of one shuffled pool. File-backed sources read their own train and test
/// files; validation is carved from the (capped) training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default = "d_n_samples")]
    pub n_samples: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_centers")]
    pub centers: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_cluster_std")]
    pub cluster_std: f64,
    #[serde(default = "d_spread")]
    pub spread: f64,
    /// Directory holding the dataset files; relative paths resolve against
    /// the data directory, or the config file's directory when none is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_cap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_cap: Option<usize>,
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,
    /// Per-channel (or per-feature) normalization applied after scaling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
    #[serde(skip)]
    pub resolved_path: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn synthetic(source: DataSource) -> Self {
        Self {
            source,
            n_samples: d_n_samples(),
            noise: d_noise(),
            centers: d_centers(),
            dim: d_dim(),
            cluster_std: d_cluster_std(),
            spread: d_spread(),
            path: None,
            train_cap: None,
            test_cap: None,
            val_fraction: d_val_fraction(),
            test_fraction: d_test_fraction(),
            mean: None,
            std: None,
            resolved_path: None,
        }
    }

    /// Per-sample input shape and class count.
    pub fn shape(&self) -> (Vec<usize>, usize) {
        match self.source {
            DataSource::TwoMoons => (vec![2], 2),
            DataSource::GaussianBlobs => (vec![self.dim], self.centers),
            DataSource::MnistIdx => (vec![1, 28, 28], 10),
            DataSource::Cifar10Binary => (vec![3, 32, 32], 10),
        }
    }

    /// `(test, val)` counts carved from a synthetic pool of `n_samples`.
    pub fn synthetic_counts(&self) -> (usize, usize) {
        let n_test = (self.n_samples as f64 * self.test_fraction).round() as usize;
        let n_val = ((self.n_samples - n_test.min(self.n_samples)) as f64 * self.val_fraction).round() as usize;
        (n_test, n_val)
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            out.push(format!("dataset.val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        match self.source {
            DataSource::TwoMoons | DataSource::GaussianBlobs => {
                if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
                    out.push(format!("dataset.test_fraction must lie in (0, 1), got {}", self.test_fraction));
                } else {
                    let (t, v) = self.synthetic_counts();
                    if t == 0 || v == 0 || t + v >= self.n_samples {
                        out.push(format!("dataset.n_samples = {} leaves an empty split (test {t}, val {v})", self.n_samples));
                    }
                }
                if !(self.noise >= 0.0 && self.noise.is_finite()) {
                    out.push("dataset.noise must be non-negative".into());
                }
                if self.source == DataSource::GaussianBlobs {
                    if self.centers < 2 {
                        out.push("dataset.centers must be at least 2".into());
                    }
                    if self.dim < 2 {
                        out.push("dataset.dim must be at least 2".into());
                    }
                    if !(self.cluster_std > 0.0) {
                        out.push("dataset.cluster_std must be positive".into());
                    }
                }
                if self.path.is_some() {
                    out.push("dataset.path is only valid for file-backed sources".into());
                }
            }
            DataSource::MnistIdx | DataSource::Cifar10Binary => match (&self.path, &self.resolved_path) {
                (None, _) => out.push("dataset.path is required for file-backed sources".into()),
                (Some(p), Some(r)) if !r.is_dir() => {
                    out.push(format!("dataset.path {} does not exist (resolved to {})", p.display(), r.display()))
                }
                _ => {}
            },
        }
        if matches!(self.train_cap, Some(0)) || matches!(self.test_cap, Some(0)) {
            out.push("dataset caps must be positive".into());
        }
        let channels = self.shape().0[0];
        match (&self.mean, &self.std) {
            (Some(m), Some(s)) => {
                for (name, v) in [("mean", m), ("std", s)] {
                    if v.len() != 1 && v.len() != channels {
                        out.push(format!("dataset.{name} needs 1 or {channels} entries, got {}", v.len()));
                    }
                }
                if s.iter().any(|x| !(*x > 0.0)) {
                    out.push("dataset.std entries must be positive".into());
                }
            }
            (None, None) => {}
            _ => out.push("dataset.mean and dataset.std must be given together".into()),
        }
        out
    }
}

/// Network family member; the input shape and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchitectureSpec {
    Mlp { name: String, hidden: Vec<usize> },
    Lenet5 { name: String },
    Custom { name: String, layers: Vec<Layer> },
}

impl ArchitectureSpec {
    pub fn name(&self) -> &str {
        match self {
            ArchitectureSpec::Mlp { name, .. } | ArchitectureSpec::Lenet5 { name } | ArchitectureSpec::Custom { name, .. } => name,
        }
    }

    pub fn build(&self, input_shape: &[usize], num_classes: usize) -> Result<NetworkSpec, String> {
        let built = match self {
            ArchitectureSpec::Mlp { hidden, .. } => {
                let d: usize = input_shape.iter().product();
                if input_shape.len() == 1 {
                    NetworkSpec::mlp(d, hidden, num_classes)
                } else {
                    // Image inputs get flattened first.
                    let mut layers = vec![Layer::Flatten];
                    let mut prev = d;
                    for &h in hidden {
                        layers.push(Layer::Dense { fan_in: prev, fan_out: h });
                        layers.push(Layer::Relu);
                        prev = h;
                    }
                    layers.push(Layer::Dense { fan_in: prev, fan_out: num_classes });
                    NetworkSpec::new(layers, input_shape.to_vec(), num_classes)
                }
            }
            ArchitectureSpec::Lenet5 { .. } => match *input_shape {
                [c, h, w] => NetworkSpec::lenet5([c, h, w], num_classes),
                _ => return Err(format!("lenet5 needs image input [C, H, W], dataset provides {input_shape:?}")),
            },
            ArchitectureSpec::Custom { layers, .. } => NetworkSpec::new(layers.clone(), input_shape.to_vec(), num_classes),
        };
        built.map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub k: usize,
    pub prune_fraction: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = TicketSearchConfig::default();
        Self { k: d.k, prune_fraction: d.prune_fraction }
    }
}

fn d_n_runs() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "d_n_runs")]
    pub n_runs: usize,
    pub architectures: Vec<ArchitectureSpec>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Defaults to `runs/<name>` next to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub save_checkpoints: bool,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn ticket_search(&self) -> TicketSearchConfig {
        TicketSearchConfig { k: self.search.k, prune_fraction: self.search.prune_fraction, train: self.train.clone(), probe: self.probe.clone() }
    }

    pub fn output_path(&self) -> PathBuf {
        let dir = self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name));
        if dir.is_absolute() {
            dir
        } else {
            self.base_dir.join(dir)
        }
    }

    /// Networks for every architecture, in config order.
    pub fn networks(&self) -> Result<Vec<(String, NetworkSpec)>, ConfigError> {
        let (shape, classes) = self.dataset.shape();
        let mut out = Vec::new();
        let mut problems = Vec::new();
        for a in &self.architectures {
            match a.build(&shape, classes) {
                Ok(spec) => out.push((a.name().to_string(), spec)),
                Err(e) => problems.push(format!("architecture `{}`: {e}", a.name())),
            }
        }
        if problems.is_empty() {
            Ok(out)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// Content hash of everything that influences results. Output location,
    /// parallelism and checkpointing are excluded.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for key in ["output_dir", "jobs", "save_checkpoints"] {
                obj.remove(key);
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.trim().is_empty() {
            out.push("name must be non-empty".into());
        }
        if self.n_runs == 0 {
            out.push("n_runs must be at least 1".into());
        }
        if self.jobs == Some(0) {
            out.push("jobs must be at least 1".into());
        }
        if self.architectures.is_empty() {
            out.push("at least one architecture is required".into());
        }
        let mut names: Vec<&str> = self.architectures.iter().map(ArchitectureSpec::name).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            out.push(format!("duplicate architecture name `{}`", w[0]));
        }
        out.extend(self.dataset.violations());
        let train_len = match self.dataset.source {
            DataSource::TwoMoons | DataSource::GaussianBlobs if self.dataset.violations().is_empty() => {
                let (t, v) = self.dataset.synthetic_counts();
                Some(self.dataset.n_samples - t - v)
            }
            _ => None,
        };
        out.extend(self.ticket_search().violations(train_len));
        if let Err(ConfigError::Invalid(p)) = self.networks() {
            out.extend(p);
        }
        out
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn diagnose(src: &str, err: toml::de::Error) -> ConfigError {
    let line = err.span().map(|s| line_of(src, s.start));
    let message = err.message().to_string();
    let unknown = Regex::new(r"unknown field `([^`]*)`(?:, expected (.*))?").unwrap();
    if let Some(c) = unknown.captures(&message) {
        let key = c[1].to_string();
        let expected: Vec<String> = c
            .get(2)
            .map(|m| Regex::new(r"`([^`]*)`").unwrap().captures_iter(m.as_str()).map(|x| x[1].to_string()).collect())
            .unwrap_or_default();
        let suggestion = expected
            .iter()
            .map(|e| (strsim::jaro_winkler(&key, e), e))
            .filter(|(score, _)| *score >= 0.8)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, e)| e.clone());
        return ConfigError::UnknownKey { key, line: line.unwrap_or(0), suggestion, expected };
    }
    ConfigError::Parse { line, message }
}

/// Parse and validate a config from TOML text. Relative paths resolve
/// against `base_dir` (and dataset paths against `data_dir` when given).
pub fn parse_config(src: &str, base_dir: &Path, data_dir: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg: ExperimentConfig = toml::from_str(src).map_err(|e| diagnose(src, e))?;
    cfg.base_dir = base_dir.to_path_buf();
    if let Some(p) = &cfg.dataset.path {
        let root = data_dir.unwrap_or(base_dir);
        cfg.dataset.resolved_path = Some(if p.is_absolute() { p.clone() } else { root.join(p) });
    }
    let problems = cfg.violations();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(problems))
    }
}

pub fn load_config(path: &Path, data_dir: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&src, &base, data_dir)
}
