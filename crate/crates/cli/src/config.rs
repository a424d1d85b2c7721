//! Experiment configuration: strict TOML schema with explicit defaults.
//!
//! Unknown keys are rejected everywhere so a config typo cannot silently
//! fall back to a default. Parsing materializes every default into the
//! struct, which is what makes the written manifest a fully-resolved,
//! re-runnable copy of the experiment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mandatory: there is deliberately no wall-clock fallback.
    pub master_seed: u64,
    /// Worker threads; 0 lets the runtime pick.
    #[serde(default)]
    pub workers: usize,
    /// Command to run when the `--command` flag is absent (manifests record
    /// the command they were produced by).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Output directory; overridden by `--out`.
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    /// Written into manifests; accepted on input so manifests re-parse.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<LyapunovConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction: Option<ContractionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariant: Option<InvariantConfig>,
    #[serde(default, rename = "weak-order", skip_serializing_if = "Option::is_none")]
    pub weak_order: Option<WeakOrderConfig>,
    #[serde(default, rename = "invariant-gap", skip_serializing_if = "Option::is_none")]
    pub invariant_gap: Option<InvariantGapConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckConfig>,
}

fn default_out_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Catalog name: `ou`, `ou_jump`, `cubic_dissipative`, `double_well`.
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iter")]
    pub newton_max_iter: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            theta: default_theta(),
            newton_tol: default_newton_tol(),
            newton_max_iter: default_newton_max_iter(),
        }
    }
}

fn default_theta() -> f64 {
    1.0
}
fn default_newton_tol() -> f64 {
    1e-12
}
fn default_newton_max_iter() -> usize {
    50
}
fn default_k() -> f64 {
    1.0
}
fn default_ref_levels() -> u32 {
    3
}
fn default_thinning() -> usize {
    1
}
fn default_mode() -> String {
    "ensemble".into()
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub horizon: f64,
    pub tau: f64,
    pub x0: Vec<f64>,
    pub n_paths: usize,
    /// Write `trajectory.csv` for path 0.
    #[serde(default = "default_true")]
    pub record_first_path: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    pub tau: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionConfig {
    pub tau: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantConfig {
    pub tau: f64,
    pub burn_in: f64,
    pub n_samples: usize,
    /// `ensemble` (independent endpoints) or `time_average`.
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakOrderConfig {
    /// `cos`, `tanh`, `x`, or `x2`.
    pub functional: String,
    #[serde(default = "default_k")]
    pub k: f64,
    pub horizon: f64,
    pub tau_list: Vec<f64>,
    pub x0: Vec<f64>,
    /// Unused in closed-form mode.
    #[serde(default)]
    pub n_paths: usize,
    /// `closed_form` or `fine_grid`.
    pub reference: String,
    #[serde(default = "default_ref_levels")]
    pub ref_levels: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantGapConfig {
    pub functional: String,
    #[serde(default = "default_k")]
    pub k: f64,
    pub tau_list: Vec<f64>,
    /// Unused in closed-form mode.
    #[serde(default)]
    pub burn_in: f64,
    /// Unused in closed-form mode.
    #[serde(default)]
    pub n_samples: usize,
    /// `closed_form` or `finest_tau`.
    pub reference: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub functional: String,
    #[serde(default = "default_k")]
    pub k: f64,
    pub horizons: Vec<f64>,
    pub x0: Vec<f64>,
    pub v: Vec<f64>,
    pub tau: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    pub tau: f64,
    /// Also audit the certified coefficient inequalities on sampled states.
    #[serde(default)]
    pub sample_assumptions: bool,
    #[serde(default = "default_check_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_check_radius")]
    pub radius: f64,
}

fn default_check_pairs() -> usize {
    2000
}
fn default_check_radius() -> f64 {
    10.0
}
