//! Report emission: a flat CSV for plotting tools and a JSON sidecar
//! carrying the complete evaluation record.
//!
//! Both files are byte-deterministic for a fixed report, so repeated runs
//! with the same seed can be compared with `diff`. The CSV holds one row
//! per curve point; everything else (configs, gains, locality, stream and
//! checkpoint hashes) lives in the sidecar.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::SimConfig;
use crate::eval::{EvalOutcome, LocalityTally, SerCurve};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid report: {0}")]
    Validation(String),
}

/// Provenance and side statistics attached to a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Seed of the evaluation frame stream.
    pub seed: u64,
    pub n_prompts: u64,
    /// Pilot count `k` used by the decision-feedback arms and the gains.
    pub pilots: usize,
    /// SHA-256 of the checkpoint file the model arms used, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    /// SHA-256 of the experiment config file, if the run came from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Commutative hash of every frame consumed; equal values across runs
    /// prove the comparisons are paired.
    pub stream_hash: u64,
    /// Worker count the run used (results are worker-independent).
    pub workers: usize,
    /// Frames skipped per arm on singular pilot systems.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub skipped: BTreeMap<String, u64>,
    /// Error locality of the `icl` arm, when it ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locality: Option<LocalityTally>,
}

/// Complete record of one evaluation, ready to serialize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment_id: String,
    pub sim: SimConfig,
    pub arms: Vec<SerCurve>,
    /// Relative SER reduction from `pilots` to the final context length,
    /// per arm where defined.
    pub gains: BTreeMap<String, f64>,
    pub metadata: ReportMeta,
}

impl EvalReport {
    /// Packs an evaluation outcome with its provenance.
    pub fn from_outcome(
        experiment_id: impl Into<String>,
        sim: SimConfig,
        outcome: EvalOutcome,
        seed: u64,
        n_prompts: u64,
        pilots: usize,
        workers: usize,
        checkpoint_hash: Option<String>,
        config_hash: Option<String>,
    ) -> Self {
        EvalReport {
            experiment_id: experiment_id.into(),
            sim,
            arms: outcome.curves,
            gains: outcome.gains,
            metadata: ReportMeta {
                seed,
                n_prompts,
                pilots,
                checkpoint_hash,
                config_hash,
                stream_hash: outcome.stream_hash,
                workers,
                skipped: outcome.skipped,
                locality: outcome.locality,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.experiment_id.is_empty() {
            return Err(ReportError::Validation("empty experiment_id".into()));
        }
        if self.arms.is_empty() {
            return Err(ReportError::Validation("report has no arms".into()));
        }
        for curve in &self.arms {
            if curve.points.is_empty() && curve.zero_context.is_none() {
                return Err(ReportError::Validation(format!(
                    "arm {} has no points",
                    curve.arm
                )));
            }
        }
        Ok(())
    }

    pub fn curve(&self, arm: &str) -> Option<&SerCurve> {
        self.arms.iter().find(|c| c.arm == arm)
    }

    /// The CSV rows, schema
    /// `experiment_id,arm,context_len,errors,trials,ser,stderr`.
    /// Zero-context points stay out, matching the plotted curves.
    pub fn csv_string(&self) -> String {
        let mut out = String::from("experiment_id,arm,context_len,errors,trials,ser,stderr\n");
        for curve in &self.arms {
            for p in &curve.points {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    self.experiment_id,
                    curve.arm,
                    p.context_len,
                    p.errors,
                    p.trials,
                    p.ser(),
                    p.stderr()
                )
                .expect("string write cannot fail");
            }
        }
        out
    }

    /// The JSON sidecar: the full report, pretty-printed with a trailing
    /// newline.
    pub fn json_string(&self) -> Result<String, ReportError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Locations a report was written to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Writes `{experiment_id}.csv` and `{experiment_id}.json` under `dir`,
/// creating it if needed and overwriting previous files.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<ReportPaths, ReportError> {
    report.validate()?;
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let paths = ReportPaths {
        csv: dir.join(format!("{}.csv", report.experiment_id)),
        json: dir.join(format!("{}.json", report.experiment_id)),
    };
    let write = |path: &Path, contents: &str| {
        fs::write(path, contents).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    write(&paths.csv, &report.csv_string())?;
    write(&paths.json, &report.json_string()?)?;
    Ok(paths)
}

/// Reads a JSON sidecar back into an [`EvalReport`].
pub fn read_report(path: &Path) -> Result<EvalReport, ReportError> {
    let bytes = fs::read(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// SHA-256 of a byte string as lowercase hex; used for checkpoint and
/// config provenance in report metadata.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("string write cannot fail");
    }
    out
}

/// SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String, ReportError> {
    let bytes = fs::read(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}
