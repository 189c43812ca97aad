//! Run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{Allocation, SyntheticTaskSpec};
use crate::error::{FedError, Result};
use crate::nn::Activation;

/// Training scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Personalized models with cluster and global-embedding regularization.
    #[default]
    Fedac,
    /// One shared model, clients restart from it every round.
    Fedavg,
    /// Clients adopt their cluster center every round and are evaluated on it.
    FesemShared,
    /// FedAC without the global-embedding term.
    ClusterOnly,
    /// FedAC without the cluster term.
    GlobalOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fedac => "fedac",
            Mode::Fedavg => "fedavg",
            Mode::FesemShared => "fesem_shared",
            Mode::ClusterOnly => "cluster_only",
            Mode::GlobalOnly => "global_only",
        }
    }

    /// Whether clients overwrite their model with the server's at round start.
    pub fn restarts_from_server(self) -> bool {
        matches!(self, Mode::Fedavg | Mode::FesemShared)
    }
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the data.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: Activation::Relu,
        }
    }
}

/// Single-teacher synthetic pool used as a partitioning source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherPoolConfig {
    pub samples: usize,
    pub input_dim: usize,
    pub class_count: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Where a partitioned dataset comes from: a dataset file or a generated pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherPoolConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletConfig {
    pub source: SourceConfig,
    pub clients: usize,
    pub alpha: f64,
    #[serde(default)]
    pub allocation: Allocation,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathologicalConfig {
    pub source: SourceConfig,
    pub clients: usize,
    pub labels_per_client: usize,
    #[serde(default)]
    pub allocation: Allocation,
    #[serde(default)]
    pub seed: u64,
}

/// Client data generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticTaskSpec),
    Dirichlet(DirichletConfig),
    Pathological(PathologicalConfig),
}

fn d_mu() -> f64 {
    0.1
}
fn d_lambda() -> f64 {
    0.1
}
fn d_k_init() -> usize {
    3
}
fn d_reduction_dim() -> usize {
    50
}
fn d_cnt_lower() -> f64 {
    0.2
}
fn d_cnt_upper() -> f64 {
    0.8
}
fn d_rounds() -> usize {
    100
}
fn d_sample_fraction() -> f64 {
    0.25
}
fn d_local_epochs() -> usize {
    5
}
fn d_batch_size() -> usize {
    32
}
fn d_map_refresh_period() -> usize {
    100
}
fn d_cnt_period() -> usize {
    10
}
fn d_cnt_enabled() -> bool {
    true
}

/// Everything that determines a run. Identical configs give identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Learning rate.
    pub eta: f64,
    /// Strength of the pull toward the cluster center.
    #[serde(default = "d_mu")]
    pub mu: f64,
    /// Strength of the pull toward the global embedding.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_k_init")]
    pub k_init: usize,
    /// Target dimension of the reduction map.
    #[serde(default = "d_reduction_dim")]
    pub reduction_dim: usize,
    /// Granularity below which a cluster is merged.
    #[serde(default = "d_cnt_lower")]
    pub cnt_lower: f64,
    /// Granularity above which a cluster is split.
    #[serde(default = "d_cnt_upper")]
    pub cnt_upper: f64,
    #[serde(default = "d_cnt_enabled")]
    pub cnt_enabled: bool,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_sample_fraction")]
    pub sample_fraction: f64,
    #[serde(default = "d_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_map_refresh_period")]
    pub map_refresh_period: usize,
    #[serde(default = "d_cnt_period")]
    pub cnt_period: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Checks the invariants that do not depend on the generated data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FedError::Config(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be non-negative, got {}", self.mu));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.k_init == 0 {
            return bad("k_init must be at least 1".into());
        }
        if self.reduction_dim == 0 {
            return bad("reduction_dim must be at least 1".into());
        }
        if !(self.cnt_lower > 0.0 && self.cnt_lower < self.cnt_upper) {
            return bad(format!(
                "CNT thresholds must satisfy 0 < cnt_lower < cnt_upper, got {} and {}",
                self.cnt_lower, self.cnt_upper
            ));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!(
                "sample_fraction must lie in (0, 1], got {}",
                self.sample_fraction
            ));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return bad("local_epochs and batch_size must be at least 1".into());
        }
        if self.map_refresh_period == 0 {
            return bad("map_refresh_period must be at least 1".into());
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return bad("model.hidden needs at least one positive width".into());
        }
        match &self.data {
            DataConfig::Synthetic(s) => s.validate()?,
            DataConfig::Dirichlet(d) => {
                d.source.validate()?;
                d.allocation.validate()?;
                if d.clients == 0 || !(d.alpha > 0.0) {
                    return bad("dirichlet data needs clients >= 1 and alpha > 0".into());
                }
            }
            DataConfig::Pathological(p) => {
                p.source.validate()?;
                p.allocation.validate()?;
                if p.clients == 0 || p.labels_per_client == 0 {
                    return bad("pathological data needs clients >= 1 and labels_per_client >= 1".into());
                }
            }
        }
        Ok(())
    }

    /// `(mu, lambda)` actually applied during local updates.
    pub fn effective_strengths(&self) -> (f64, f64) {
        match self.mode {
            Mode::Fedac => (self.mu, self.lambda),
            Mode::ClusterOnly => (self.mu, 0.0),
            Mode::GlobalOnly => (0.0, self.lambda),
            Mode::Fedavg | Mode::FesemShared => (0.0, 0.0),
        }
    }

    /// Number of clients sampled per round out of `m`.
    pub fn sample_size(&self, m: usize) -> usize {
        ((self.sample_fraction * m as f64).ceil() as usize).clamp(1, m.max(1))
    }

    /// The reduction map is refitted on these rounds.
    pub fn refreshes_map(&self, round: u64) -> bool {
        round.is_multiple_of(self.map_refresh_period as u64)
    }

    /// Cluster number tuning runs every `cnt_period` rounds once one map
    /// refresh period has elapsed.
    pub fn runs_cnt(&self, round: u64) -> bool {
        self.cnt_enabled
            && self.cnt_period > 0
            && round >= self.map_refresh_period as u64
            && round.is_multiple_of(self.cnt_period as u64)
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.teacher) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(FedError::Config(
                "data.source needs exactly one of `path` or `teacher`".into(),
            )),
        }
    }
}
