//! Option resolution: every subcommand's settings can come from a TOML
//! file (`--config`), from command-line flags, or both, with flags taking
//! precedence key by key. The same structs parse both sources, so the
//! configuration files are flat key lists and unknown keys are rejected.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))
}

macro_rules! keep_last {
    ($base:expr, $over:expr, $($field:ident),+ $(,)?) => {{
        let mut merged = $base;
        $( if $over.$field.is_some() { merged.$field = $over.$field; } )+
        merged
    }};
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitArgs {
    /// Observations: CSV with header subject_id,t,x.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,

    /// Basis functions for the mean curve.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_f: Option<usize>,

    /// Basis functions for the subject curves.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_r: Option<usize>,

    /// Lower end of the spline domain (default: earliest observation).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_min: Option<f64>,

    /// Upper end of the spline domain (default: latest observation).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_max: Option<f64>,

    /// Iteration cap for the fitting loop.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,

    /// Relative log-likelihood change that counts as converged.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,

    /// Directory for the report files (default: current directory).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl FitArgs {
    pub fn merge_over(self, base: Self) -> Self {
        keep_last!(base, self, data, m_f, m_r, domain_min, domain_max, max_iter, rel_tol, out_dir)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectArgs {
    /// Observations: CSV with header subject_id,t,x.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,

    /// Smallest mean-curve basis size on the grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mf_min: Option<usize>,

    /// Largest mean-curve basis size on the grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mf_max: Option<usize>,

    /// Smallest subject-curve basis size on the grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mr_min: Option<usize>,

    /// Largest subject-curve basis size on the grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mr_max: Option<usize>,

    /// Lower end of the spline domain (default: earliest observation).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_min: Option<f64>,

    /// Upper end of the spline domain (default: latest observation).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_max: Option<f64>,

    /// Iteration cap for the fitting loop.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,

    /// Relative log-likelihood change that counts as converged.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,

    /// Directory for the report files (default: current directory).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl SelectArgs {
    pub fn merge_over(self, base: Self) -> Self {
        keep_last!(
            base, self, data, mf_min, mf_max, mr_min, mr_max, domain_min, domain_max, max_iter,
            rel_tol, out_dir
        )
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateArgs {
    /// Subjects per replication.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subjects: Option<usize>,

    /// Number of replications.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,

    /// Observations per subject.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,

    /// Base seed for the study's random substreams.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// How noise scales with a subject's curve range: variance or sd.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_law: Option<String>,

    /// Scale constant of the noise law.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,

    /// Smallest mean-curve basis size on the grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mf_min: Option<usize>,

    /// Largest mean-curve basis size on the grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mf_max: Option<usize>,

    /// Smallest subject-curve basis size on the grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mr_min: Option<usize>,

    /// Largest subject-curve basis size on the grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mr_max: Option<usize>,

    /// Iteration cap for the fitting loop.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,

    /// Relative log-likelihood change that counts as converged.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,

    /// Also write the per-replication audit table.
    #[arg(long, action = clap::ArgAction::SetTrue)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<bool>,

    /// Directory for the report files (default: current directory).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl SimulateArgs {
    pub fn merge_over(self, base: Self) -> Self {
        keep_last!(
            base,
            self,
            subjects,
            replications,
            points,
            seed,
            noise_law,
            noise_scale,
            mf_min,
            mf_max,
            mr_min,
            mr_max,
            max_iter,
            rel_tol,
            audit,
            out_dir
        )
    }
}

/// Pulls a required field out of a merged argument set.
pub fn require<T>(value: Option<T>, flag: &str) -> AppResult<T> {
    value.ok_or_else(|| {
        AppError::Parse(format!(
            "missing required setting {flag} (flag --{} or configuration key {})",
            flag.replace('_', "-"),
            flag
        ))
    })
}
