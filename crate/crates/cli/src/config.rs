//! Declarative experiment configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use ggn_core::ggn::{ExchangeSchedule, DEFAULT_RIDGE};
use ggn_core::psse::PartitionKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable overriding `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "GGN_OUTPUT_DIR";

/// Case identifier for the bundled IEEE 30-bus system.
pub const BUILTIN_IEEE30: &str = "builtin:ieee30";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Centralized,
    Ggn,
    Diffusion,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Centralized => "centralized",
            Algorithm::Ggn => "ggn",
            Algorithm::Diffusion => "diffusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Cse,
    Ure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Sites adjacent when a branch joins them.
    Grid,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GossipSection {
    pub protocol: ProtocolKind,
    pub topology: TopologyKind,
    pub beta: f64,
    pub link_failure_prob: f64,
    pub comm_interval: usize,
}

impl Default for GossipSection {
    fn default() -> Self {
        Self {
            protocol: ProtocolKind::Cse,
            topology: TopologyKind::Grid,
            beta: 0.3,
            link_failure_prob: 0.0,
            comm_interval: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKindSpec {
    Constant,
    Incrementing,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GgnSection {
    pub alpha: f64,
    pub schedule: ScheduleKindSpec,
    /// `l_k` for a constant schedule, `l_1` for an incrementing one.
    pub exchanges: usize,
    /// Per-update exchanges for an explicit schedule.
    pub exchange_list: Vec<usize>,
    /// Updates per snapshot.
    pub max_updates: usize,
    pub stop_tol: f64,
    pub ridge: f64,
    /// Record descent discrepancies (one exact solve per agent and update).
    pub diagnostics: bool,
}

impl Default for GgnSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            schedule: ScheduleKindSpec::Constant,
            exchanges: 3,
            exchange_list: Vec::new(),
            max_updates: 15,
            stop_tol: 1e-12,
            ridge: DEFAULT_RIDGE,
            diagnostics: false,
        }
    }
}

impl GgnSection {
    pub fn schedule(&self) -> ExchangeSchedule {
        match self.schedule {
            ScheduleKindSpec::Constant => ExchangeSchedule::Constant(self.exchanges),
            ScheduleKindSpec::Incrementing => ExchangeSchedule::Incrementing {
                start: self.exchanges,
            },
            ScheduleKindSpec::Explicit => ExchangeSchedule::Explicit(self.exchange_list.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// `c / l`.
    Diminishing,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// Step constants `c`; `run` uses the first, `compare` sweeps all.
    pub steps: Vec<f64>,
    pub step_kind: StepKind,
    /// Exchanges per snapshot.
    pub total_exchanges: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: vec![0.3],
            step_kind: StepKind::Diminishing,
            total_exchanges: 900,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentralizedSection {
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CentralizedSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            max_iter: 50,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertScheduleSpec {
    Constant,
    Incrementing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateSection {
    pub enabled: bool,
    /// Uniform samples used to estimate the problem constants.
    pub samples: usize,
    /// Sampling box: `|theta| <= theta_bound`, `v_lower <= V <= v_upper`.
    pub theta_bound: f64,
    pub v_lower: f64,
    pub v_upper: f64,
    pub xi: f64,
    pub schedule: CertScheduleSpec,
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self {
            enabled: true,
            samples: 32,
            theta_bound: 0.5,
            v_lower: 0.8,
            v_upper: 1.2,
            xi: 0.25,
            schedule: CertScheduleSpec::Incrementing,
        }
    }
}

fn default_partition() -> PartitionKind {
    PartitionKind::Contiguous
}
fn default_one() -> usize {
    1
}
fn default_scale() -> f64 {
    1.0
}
fn default_reps() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `builtin:ieee30` or a path to a MATPOWER case file.
    pub case: String,
    /// Optional CSV `bus,theta,V`; otherwise a power flow is solved.
    #[serde(default)]
    pub true_state: Option<PathBuf>,
    pub algorithm: Algorithm,
    pub sites: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionKind,
    pub sigma2: f64,
    #[serde(default = "default_one")]
    pub snapshots: usize,
    #[serde(default = "default_scale")]
    pub load_scale: f64,
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub gossip: GossipSection,
    #[serde(default)]
    pub ggn: GgnSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub centralized: CentralizedSection,
    #[serde(default)]
    pub certificate: CertificateSection,
}

fn field_error(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

fn check(ok: bool, field: &str, message: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(field_error(field, message))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config {
            field: e
                .span()
                .map_or_else(String::new, |s| format!("bytes {}..{}", s.start, s.end)),
            message: e.message().to_string(),
        })
    }

    /// Read, resolve relative paths against the file's directory, apply the
    /// output override and validate.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env_override();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.case != BUILTIN_IEEE30 && Path::new(&self.case).is_relative() {
            self.case = base.join(&self.case).to_string_lossy().into_owned();
        }
        if let Some(p) = &self.true_state {
            if p.is_relative() {
                self.true_state = Some(base.join(p));
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn apply_env_override(&mut self) {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.case != BUILTIN_IEEE30 && !Path::new(&self.case).is_file() {
            return Err(field_error(
                "case",
                format!("file '{}' does not exist", self.case),
            ));
        }
        if let Some(p) = &self.true_state {
            check(p.is_file(), "true_state", "file does not exist")?;
        }
        check(self.sites >= 1, "sites", "must be at least 1")?;
        check(
            self.sigma2 >= 0.0 && self.sigma2.is_finite(),
            "sigma2",
            "must be finite and >= 0",
        )?;
        check(self.snapshots >= 1, "snapshots", "must be at least 1")?;
        check(
            self.load_scale >= 0.0 && self.load_scale.is_finite(),
            "load_scale",
            "must be finite and >= 0",
        )?;
        check(self.repetitions >= 1, "repetitions", "must be at least 1")?;

        let g = &self.gossip;
        check(
            g.beta > 0.0 && g.beta < 1.0,
            "gossip.beta",
            "must be in (0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&g.link_failure_prob),
            "gossip.link_failure_prob",
            "must be in [0, 1)",
        )?;
        check(
            g.comm_interval >= 1,
            "gossip.comm_interval",
            "must be at least 1",
        )?;

        let n = &self.ggn;
        check(
            n.alpha > 0.0 && n.alpha <= 1.0,
            "ggn.alpha",
            "must be in (0, 1]",
        )?;
        check(n.max_updates >= 1, "ggn.max_updates", "must be at least 1")?;
        check(n.stop_tol > 0.0, "ggn.stop_tol", "must be positive")?;
        check(n.ridge >= 0.0, "ggn.ridge", "must be >= 0")?;
        match n.schedule {
            ScheduleKindSpec::Explicit => check(
                !n.exchange_list.is_empty() && n.exchange_list.iter().all(|l| *l >= 1),
                "ggn.exchange_list",
                "must be a nonempty list of positive counts",
            )?,
            _ => check(n.exchanges >= 1, "ggn.exchanges", "must be at least 1")?,
        }

        let d = &self.diffusion;
        check(
            !d.steps.is_empty() && d.steps.iter().all(|c| *c >= 0.0 && c.is_finite()),
            "diffusion.steps",
            "must be a nonempty list of finite nonnegative step constants",
        )?;
        check(
            d.total_exchanges >= 1,
            "diffusion.total_exchanges",
            "must be at least 1",
        )?;

        let c = &self.centralized;
        check(
            c.alpha > 0.0 && c.alpha <= 1.0,
            "centralized.alpha",
            "must be in (0, 1]",
        )?;
        check(c.tol > 0.0, "centralized.tol", "must be positive")?;

        let cert = &self.certificate;
        check(
            cert.samples >= 2,
            "certificate.samples",
            "must be at least 2",
        )?;
        check(
            cert.theta_bound > 0.0,
            "certificate.theta_bound",
            "must be positive",
        )?;
        check(
            0.0 <= cert.v_lower && cert.v_lower < cert.v_upper,
            "certificate.v_lower",
            "must satisfy 0 <= v_lower < v_upper",
        )?;
        check(
            cert.xi > 0.0 && cert.xi < 0.5,
            "certificate.xi",
            "must be in (0, 1/2)",
        )?;
        Ok(())
    }
}
