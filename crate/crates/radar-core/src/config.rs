//! Training configuration: defaults, validation, and the key/value config
//! file format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
}

/// Sign convention for the ordering-policy reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardSign {
    /// Reward orderings the denoiser reconstructs well (default).
    #[default]
    Pos,
    /// Reward low-likelihood orderings.
    Neg,
}

/// Which communication-cost measurement feeds the utility objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostSource {
    /// Structural proxy: (edges + active nodes) / cost_normalizer.
    #[default]
    Synthetic,
    /// Token totals from a mock execution, normalized by token_budget.
    Executor,
}

/// All knobs of a training run. The config file is TOML key = value pairs
/// mirroring these field names; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Forward trajectories sampled per graph per update (M).
    pub trajectories: usize,
    /// Topologies generated per utility update (B).
    pub batch: usize,
    pub epochs: usize,
    pub lr_ordering: f64,
    pub lr_denoiser: f64,
    /// Global gradient-norm clip applied by both optimizers.
    pub grad_clip: f64,
    /// Trade-off between incoming and outgoing effective size.
    pub beta: f64,
    /// Communication-cost weight in the utility objective.
    pub alpha: f64,
    /// Run utility updates every this many epochs.
    pub utility_period: usize,
    /// Fraction of queries evaluated at each utility update, in (0, 1].
    pub utility_fraction: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub gnn_layers: usize,
    pub mixture_components: usize,
    pub pe_dim: usize,
    pub query_dim: usize,
    pub comp_emb_dim: usize,
    pub mlp_hidden: usize,
    /// Divisor for the structural cost proxy.
    pub cost_normalizer: f64,
    /// Token budget divisor when cost_source = executor.
    pub token_budget: f64,
    /// Utility at or above this labels a dataset record correct.
    pub utility_threshold: f64,
    /// Refinement rounds for executor-backed evaluation (K).
    pub rounds: usize,
    pub reward_sign: RewardSign,
    pub cost_source: CostSource,
    pub no_es: bool,
    pub no_utility: bool,
    pub no_query: bool,
    pub phi_on_g0: bool,
    pub stale_neighbors: bool,
    /// Topologies sampled per epoch for the effective-size metric column.
    pub es_probe_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trajectories: 4,
            batch: 8,
            epochs: 50,
            lr_ordering: 5e-4,
            lr_denoiser: 1e-4,
            grad_clip: 5.0,
            beta: 0.7,
            alpha: 0.1,
            utility_period: 5,
            utility_fraction: 0.2,
            seed: 0,
            hidden_dim: 32,
            gnn_layers: 3,
            mixture_components: 3,
            pe_dim: 8,
            query_dim: 384,
            comp_emb_dim: 8,
            mlp_hidden: 32,
            cost_normalizer: 20.0,
            token_budget: 1000.0,
            utility_threshold: 0.5,
            rounds: 1,
            reward_sign: RewardSign::Pos,
            cost_source: CostSource::Synthetic,
            no_es: false,
            no_utility: false,
            no_query: false,
            phi_on_g0: false,
            stale_neighbors: false,
            es_probe_samples: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn fail(field: &'static str, message: impl Into<String>) -> Result<(), ConfigError> {
            Err(ConfigError::Invalid {
                field,
                message: message.into(),
            })
        }
        if self.trajectories < 1 {
            return fail("trajectories", "must be >= 1");
        }
        if self.batch < 1 {
            return fail("batch", "must be >= 1");
        }
        if self.utility_period < 1 {
            return fail("utility_period", "must be >= 1");
        }
        if !(self.utility_fraction > 0.0 && self.utility_fraction <= 1.0) {
            return fail("utility_fraction", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail("beta", "must be in [0, 1]");
        }
        if self.lr_ordering <= 0.0 {
            return fail("lr_ordering", "must be positive");
        }
        if self.lr_denoiser <= 0.0 {
            return fail("lr_denoiser", "must be positive");
        }
        if self.grad_clip <= 0.0 {
            return fail("grad_clip", "must be positive");
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim", "must be positive");
        }
        if self.gnn_layers == 0 {
            return fail("gnn_layers", "must be positive");
        }
        if self.mixture_components == 0 {
            return fail("mixture_components", "must be >= 1");
        }
        if self.pe_dim == 0 || self.pe_dim % 2 != 0 {
            return fail("pe_dim", "must be a positive even number");
        }
        if self.query_dim == 0 {
            return fail("query_dim", "must be positive");
        }
        if self.cost_normalizer <= 0.0 {
            return fail("cost_normalizer", "must be positive");
        }
        if self.token_budget <= 0.0 {
            return fail("token_budget", "must be positive");
        }
        if self.rounds == 0 {
            return fail("rounds", "must be >= 1");
        }
        if self.es_probe_samples == 0 {
            return fail("es_probe_samples", "must be >= 1");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hash of the resolved config, recorded in checkpoints and
    /// manifests.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::query::fnv1a64(canonical.as_bytes()))
    }
}
