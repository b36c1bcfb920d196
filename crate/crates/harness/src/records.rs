//! The runs.jsonl line format and its schema check.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use ticketforge::ticket_search::{RunRecord, RunStatus, StageRecord, WinningTickets};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    BadLine { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: usize,
    pub reason: String,
}

/// One run, as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLine {
    pub run_id: u64,
    pub seed: u64,
    pub arch: String,
    pub arch_params: usize,
    pub config_digest: String,
    pub stages: Vec<StageRecord>,
    pub success: bool,
    pub best_sparse_stage: Option<usize>,
    pub sparsest_matching_stage: Option<usize>,
    /// "complete" or "failed".
    pub status: String,
    pub failure: Option<Failure>,
    pub mask_digests: Vec<String>,
}

impl RunLine {
    pub fn new(run: &RunRecord, tickets: WinningTickets, arch: &str, arch_params: usize, config_digest: &str) -> Self {
        let (status, failure) = match &run.status {
            RunStatus::Complete => ("complete", None),
            RunStatus::Failed { stage, reason } => ("failed", Some(Failure { stage: *stage, reason: reason.clone() })),
        };
        RunLine {
            run_id: run.run_id,
            seed: run.seed,
            arch: arch.to_string(),
            arch_params,
            config_digest: config_digest.to_string(),
            stages: run.stages.clone(),
            success: tickets.success,
            best_sparse_stage: tickets.best_sparse,
            sparsest_matching_stage: tickets.sparsest_matching,
            status: status.to_string(),
            failure,
            mask_digests: run.mask_digests.clone(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == "complete"
    }

    pub fn to_record(&self) -> (RunRecord, WinningTickets) {
        let status = match &self.failure {
            Some(f) if !self.is_complete() => RunStatus::Failed { stage: f.stage, reason: f.reason.clone() },
            None if !self.is_complete() => RunStatus::Failed { stage: self.stages.len(), reason: String::new() },
            _ => RunStatus::Complete,
        };
        let run = RunRecord {
            run_id: self.run_id,
            seed: self.seed,
            stages: self.stages.clone(),
            mask_digests: self.mask_digests.clone(),
            status,
        };
        let tickets = WinningTickets {
            success: self.success,
            best_sparse: self.best_sparse_stage,
            sparsest_matching: self.sparsest_matching_stage,
        };
        (run, tickets)
    }
}

/// Key, predicate, and the expected type for the error message.
type KeyCheck = (&'static str, fn(&Value) -> bool, &'static str);

const STAGE_KEYS: [&str; 6] = ["k", "surviving_fraction", "val_acc", "test_acc", "trajectory_length", "epochs"];

fn is_uint(v: &Value) -> bool {
    v.as_u64().is_some()
}

fn is_opt_uint(v: &Value) -> bool {
    v.is_null() || is_uint(v)
}

/// Check one parsed line against the runs.jsonl schema. Complete runs must
/// carry exactly `k + 1` stages. Returns every problem found.
pub fn validate_line(v: &Value, k: usize) -> Vec<String> {
    let mut out = Vec::new();
    let Some(obj) = v.as_object() else {
        return vec!["line is not a JSON object".into()];
    };
    let checks: [KeyCheck; 12] = [
        ("run_id", is_uint, "unsigned integer"),
        ("seed", is_uint, "unsigned integer"),
        ("arch", Value::is_string, "string"),
        ("arch_params", is_uint, "unsigned integer"),
        ("config_digest", |v| v.as_str().is_some_and(|s| s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())), "64-char hex string"),
        ("stages", Value::is_array, "array"),
        ("success", Value::is_boolean, "boolean"),
        ("best_sparse_stage", is_opt_uint, "stage index or null"),
        ("sparsest_matching_stage", is_opt_uint, "stage index or null"),
        ("status", |v| matches!(v.as_str(), Some("complete" | "failed")), "\"complete\" or \"failed\""),
        ("failure", |v| v.is_null() || v.is_object(), "object or null"),
        ("mask_digests", |v| v.as_array().is_some_and(|a| a.iter().all(Value::is_string)), "array of strings"),
    ];
    for (key, ok, what) in checks {
        match obj.get(key) {
            None => out.push(format!("missing `{key}`")),
            Some(x) if !ok(x) => out.push(format!("`{key}` must be {what}")),
            _ => {}
        }
    }
    for key in obj.keys() {
        if !checks.iter().any(|(k, _, _)| k == key) {
            out.push(format!("unexpected key `{key}`"));
        }
    }
    let stages = obj.get("stages").and_then(Value::as_array).cloned().unwrap_or_default();
    for (i, s) in stages.iter().enumerate() {
        let Some(so) = s.as_object() else {
            out.push(format!("stages[{i}] is not an object"));
            continue;
        };
        for key in STAGE_KEYS {
            let good = match (key, so.get(key)) {
                (_, None) => false,
                ("k", Some(x)) => x.as_u64() == Some(i as u64),
                ("epochs", Some(x)) => is_uint(x),
                ("surviving_fraction" | "val_acc" | "test_acc", Some(x)) => x.as_f64().is_some_and(|f| (0.0..=1.0).contains(&f)),
                (_, Some(x)) => x.as_f64().is_some_and(|f| f >= 0.0),
            };
            if !good {
                out.push(format!("stages[{i}].{key} is missing or invalid"));
            }
        }
        if so.len() != STAGE_KEYS.len() {
            out.push(format!("stages[{i}] has unexpected keys"));
        }
    }
    let complete = obj.get("status").and_then(Value::as_str) == Some("complete");
    if complete && stages.len() != k + 1 {
        out.push(format!("complete run has {} stages, expected {}", stages.len(), k + 1));
    }
    if !complete && stages.len() > k + 1 {
        out.push(format!("failed run has {} stages, more than {}", stages.len(), k + 1));
    }
    if complete && obj.get("mask_digests").and_then(Value::as_array).is_some_and(|a| a.len() != k) {
        out.push(format!("complete run needs {k} mask digests"));
    }
    let success = obj.get("success").and_then(Value::as_bool);
    let best = obj.get("best_sparse_stage").and_then(Value::as_u64);
    let sparsest = obj.get("sparsest_matching_stage").and_then(Value::as_u64);
    match success {
        Some(true) if best.is_none() || sparsest.is_none() => out.push("successful run must name both ticket stages".into()),
        Some(false) if best.is_some() || sparsest.is_some() => out.push("unsuccessful run names a ticket stage".into()),
        _ => {}
    }
    for s in [best, sparsest].into_iter().flatten() {
        if s == 0 || s as usize >= stages.len() {
            out.push(format!("ticket stage {s} is not a sparse stage of this run"));
        }
    }
    out
}

/// Contents of a runs.jsonl file.
#[derive(Debug, Default)]
pub struct RunsFile {
    pub lines: Vec<RunLine>,
    /// Byte length of the valid prefix. A crash mid-write can leave a partial
    /// last line without a newline; it is excluded here.
    pub valid_len: u64,
    pub truncated_tail: bool,
}

/// Read runs.jsonl, validating every line. A partial final line (no trailing
/// newline) is reported through `truncated_tail` instead of as an error.
pub fn read_runs(path: &Path, k: usize) -> Result<RunsFile, RecordError> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(RunsFile::default()),
        Err(source) => return Err(RecordError::Io { path: path.to_path_buf(), source }),
    };
    let mut reader = BufReader::new(file);
    let mut out = RunsFile::default();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|source| RecordError::Io { path: path.to_path_buf(), source })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            out.truncated_tail = true;
            break;
        }
        let bad = |reason: String| RecordError::BadLine { path: path.to_path_buf(), line: line_no, reason };
        let value: Value = serde_json::from_str(buf.trim_end()).map_err(|e| bad(e.to_string()))?;
        let problems = validate_line(&value, k);
        if !problems.is_empty() {
            return Err(bad(problems.join("; ")));
        }
        out.lines.push(serde_json::from_value(value).map_err(|e| bad(e.to_string()))?);
        out.valid_len += n as u64;
    }
    Ok(out)
}
