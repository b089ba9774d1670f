//! Round engine: mixture clients and server, pruning, baselines,
//! personalization and new-client inference.

mod baselines;
mod checkpoint;
mod client;
mod inference;
mod server;

pub use baselines::{baseline_client_update, shared_mask};

/// Local SGD on cross-entropy for `epochs` passes, as a baseline client runs it.
pub fn train_single_for_audit(
    spec: &MlpSpec,
    params: &mut ParamVector,
    shard: &crate::data::ShardDataset,
    cfg: &RoundConfig,
    epochs: usize,
) -> Result<()> {
    baselines::train_single(spec, params, shard, cfg, epochs, 0, &[u64::MAX - 2, shard.shard_id as u64])
}
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use client::{client_update, prune_filter, train_mixture, TrainOptions};
pub use inference::{
    ensemble_gate_predict, evaluate_global, evaluate_local, finetune, fit_new_client_gate, predict_snapshot,
};
pub use server::{aggregation_weights, expert_deltas, server_round, transmission_mask, RoundSummary};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{ExpertBank, LocalGate};
use crate::numerics::{rng, AdamState, MlpSpec, ParamVector};
use crate::posterior::{PosteriorTable, SideInfoKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedmix,
    Fedavg,
    BiasedFedavg,
    LocalGlobal,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Fedmix => "fedmix",
            Algorithm::Fedavg => "fedavg",
            Algorithm::BiasedFedavg => "biased_fedavg",
            Algorithm::LocalGlobal => "local_global",
        }
    }

    pub fn is_mixture(self) -> bool {
        self == Algorithm::Fedmix
    }
}

/// How the server applies aggregated deltas (treated as gradients).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerOptimizer {
    #[default]
    Adam,
    /// Plain descent; with `lr_server = 1` the server takes the weighted
    /// average of the returned models.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub k: usize,
    pub beta_entropy: f64,
    pub gamma: f64,
    pub eta: f64,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_client: f64,
    pub lr_server: f64,
    pub algorithm: Algorithm,
    pub side_info: SideInfoKey,
    pub seed: u64,
    /// Server-side marginal-entropy regularizer on φ.
    pub entropy_regularizer: bool,
    pub gate_through_features: bool,
    pub server_optimizer: ServerOptimizer,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("training.{f}");
        if self.k == 0 {
            return Err(Error::config(field("experts"), "must be at least 1"));
        }
        if !self.algorithm.is_mixture() && self.k != 1 {
            return Err(Error::config(field("experts"), "baselines use a single model; set experts = 1"));
        }
        if !(self.beta_entropy > 0.0) {
            return Err(Error::config(field("beta_entropy"), "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(field("gamma"), "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(field("eta"), "must lie in [0, 1]"));
        }
        if self.clients_per_round == 0 {
            return Err(Error::config(field("clients_per_round"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be at least 1"));
        }
        if !(self.lr_client >= 0.0) || !self.lr_client.is_finite() {
            return Err(Error::config(field("lr_client"), "must be finite and >= 0"));
        }
        if !(self.lr_server >= 0.0) || !self.lr_server.is_finite() {
            return Err(Error::config(field("lr_server"), "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A model as last sent to the server by one client. Baselines hold their
/// merged (global + local) parameters as a single-expert bank without a gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub bank: ExpertBank,
    pub gate: Option<LocalGate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub shard_id: usize,
    pub gate: Option<LocalGate>,
    pub local_bias: Option<Vec<f64>>,
    pub local_layers: Option<ParamVector>,
    pub last_communicated: Option<Snapshot>,
}

impl ClientState {
    pub fn new(shard_id: usize) -> Self {
        ClientState {
            shard_id,
            gate: None,
            local_bias: None,
            local_layers: None,
            last_communicated: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub bank: ExpertBank,
    pub phi: PosteriorTable,
    pub adam_bank: Vec<AdamState>,
    pub adam_phi: AdamState,
    pub stored_qzs: BTreeMap<usize, Vec<f64>>,
    pub round: usize,
}

impl ServerState {
    /// Fresh server: experts from the `init` stream, uniform φ, zero moments.
    pub fn new(spec: MlpSpec, k: usize, categories: usize, seed: u64) -> Self {
        let bank = ExpertBank::init(spec, k, seed);
        let phi = PosteriorTable::uniform(categories, k);
        let adam_bank = bank
            .experts
            .iter()
            .map(|e| AdamState::new(e.as_ref().expect("fresh bank is full")))
            .collect();
        let adam_phi = AdamState::new(&phi.to_params());
        ServerState {
            bank,
            phi,
            adam_bank,
            adam_phi,
            stored_qzs: BTreeMap::new(),
            round: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub shard_id: usize,
    /// Updated experts; `None` for experts not returned.
    pub experts: Vec<Option<ParamVector>>,
    pub phi: Option<PosteriorTable>,
    pub q_z_given_s: Vec<f64>,
    pub n_examples: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl ClientReport {
    pub fn returned(&self) -> usize {
        self.experts.iter().flatten().count()
    }
}

/// Clients for round `round`: without replacement within the round, sorted.
pub fn sample_clients(num_clients: usize, per_round: usize, seed: u64, round: usize) -> Vec<usize> {
    use rand::seq::index::sample;
    if per_round >= num_clients {
        return (0..num_clients).collect();
    }
    let mut r = rng::stream(seed, "sampling", &[round as u64]);
    let mut chosen = sample(&mut r, num_clients, per_round).into_vec();
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic_without_replacement() {
        let a = sample_clients(20, 5, 7, 3);
        assert_eq!(a, sample_clients(20, 5, 7, 3));
        let mut d = a.clone();
        d.dedup();
        assert_eq!(d.len(), 5);
        assert_eq!(sample_clients(4, 10, 7, 0), vec![0, 1, 2, 3]);
        assert_ne!(sample_clients(20, 5, 7, 3), sample_clients(20, 5, 7, 4));
    }
}
