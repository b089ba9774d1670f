//! Versioned TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PartitionScheme, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{Algorithm, RoundConfig, ServerOptimizer};
use crate::posterior::SideInfoKey;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub seed: u64,
    pub rounds: usize,
    pub eval_every: usize,
    /// Rounds between φ and q(z|s) snapshots; 0 disables them.
    #[serde(default)]
    pub phi_snapshot_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub shards: usize,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "four")]
    pub n_permutations: usize,
    #[serde(default = "eight")]
    pub transform_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub algorithm: Algorithm,
    pub experts: usize,
    /// Hidden layer widths of every expert.
    pub hidden: Vec<usize>,
    pub beta_entropy: f64,
    pub gamma: f64,
    #[serde(default)]
    pub eta: f64,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_client: f64,
    pub lr_server: f64,
    pub side_info: SideInfoKey,
    #[serde(default = "yes")]
    pub entropy_regularizer: bool,
    #[serde(default)]
    pub gate_grad_through_features: bool,
    #[serde(default)]
    pub server_optimizer: ServerOptimizer,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub finetune_epochs: usize,
}

fn one() -> f64 {
    1.0
}

fn four() -> usize {
    4
}

fn eight() -> usize {
    8
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("<config>")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization, without `output_dir`.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = None;
        hex::encode(Sha256::digest(canon.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::config(
                "config_version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.config_version),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.training.hidden.contains(&0) {
            return Err(Error::config("training.hidden", "widths must be positive"));
        }
        if self.training.algorithm == Algorithm::LocalGlobal && self.training.hidden.is_empty() {
            return Err(Error::config("training.hidden", "local_global needs at least one hidden layer"));
        }
        if self.training.side_info == SideInfoKey::TransformIndex
            && !matches!(
                self.partition.scheme,
                PartitionScheme::TransformSkew | PartitionScheme::TransformLabelSkew
            )
        {
            return Err(Error::config("training.side_info", "transform_index needs a transform partition scheme"));
        }
        if self.dataset.dim < 2 {
            return Err(Error::config("dataset.dim", "must be at least 2"));
        }
        self.partition_spec().validate(self.dataset.classes)?;
        self.round_config().validate()
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            scheme: self.partition.scheme,
            shards: self.partition.shards,
            alpha: self.partition.alpha,
            n_permutations: self.partition.n_permutations,
            transform_count: self.partition.transform_count,
            seed: self.seed,
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        let t = &self.training;
        RoundConfig {
            k: t.experts,
            beta_entropy: t.beta_entropy,
            gamma: t.gamma,
            eta: t.eta,
            clients_per_round: t.clients_per_round,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            lr_client: t.lr_client,
            lr_server: t.lr_server,
            algorithm: t.algorithm,
            side_info: t.side_info,
            seed: self.seed,
            entropy_regularizer: t.entropy_regularizer,
            gate_through_features: t.gate_grad_through_features,
            server_optimizer: t.server_optimizer,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dataset.dim];
        w.extend(&self.training.hidden);
        w.push(self.dataset.classes);
        w
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const EXAMPLE: &str = r#"
config_version = 1
seed = 7
rounds = 3
eval_every = 1

[dataset]
classes = 4
dim = 8
n = 400
spread = 0.5

[partition]
scheme = "label_permutation"
shards = 4

[training]
algorithm = "fedmix"
experts = 2
hidden = [16]
beta_entropy = 1.0
gamma = 0.75
clients_per_round = 4
local_epochs = 1
batch_size = 16
lr_client = 0.05
lr_server = 0.01
side_info = "label"
"#;

    #[test]
    fn parses_with_defaults_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.partition.n_permutations, 4);
        assert!(cfg.training.entropy_regularizer);
        assert_eq!(cfg.training.eta, 0.0);
        assert_eq!(cfg.widths(), vec![8, 16, 4]);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn missing_and_unknown_fields_are_named() {
        let missing = EXAMPLE.replace("rounds = 3\n", "");
        match ExperimentConfig::from_toml(&missing) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "rounds"),
            other => panic!("{other:?}"),
        }
        let unknown = EXAMPLE.replace("seed = 7", "seed = 7\nsed = 8");
        match ExperimentConfig::from_toml(&unknown) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "sed"),
            other => panic!("{other:?}"),
        }
        let bad = EXAMPLE.replace("gamma = 0.75", "gamma = 1.5");
        match ExperimentConfig::from_toml(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "training.gamma"),
            other => panic!("{other:?}"),
        }
        let version = EXAMPLE.replace("config_version = 1", "config_version = 2");
        assert!(matches!(ExperimentConfig::from_toml(&version), Err(Error::Config { .. })));
    }
}
