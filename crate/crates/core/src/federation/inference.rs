use super::baselines::{merged_params, train_single};
use super::client::{train_mixture, TrainOptions};
use super::{Algorithm, ClientState, RoundConfig, ServerState, Snapshot};
use crate::data::{ShardDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{argmax, mean_local_accuracy};
use crate::moe::{mix_predictive, mixture_predict, moe_forward, regate, ExpertBank, LocalGate};
use crate::numerics::{forward, forward_from, hidden_activation, softmax, ParamVector};
use crate::posterior::PosteriorTable;

/// Class distribution of a snapshot: the gated mixture, or the single model.
pub fn predict_snapshot(snapshot: &Snapshot, x: &[f64]) -> Result<Vec<f64>> {
    match &snapshot.gate {
        Some(gate) => mixture_predict(&snapshot.bank, gate, x),
        None => {
            let params = snapshot
                .bank
                .expert(0)
                .ok_or_else(|| Error::Contract("snapshot without a model".into()))?;
            Ok(softmax(&forward(&snapshot.bank.spec, params, x)?.0))
        }
    }
}

fn accuracy_on(shard: &ShardDataset, split: Split, predict: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<f64> {
    let idx = shard.split(split);
    let mut hits = 0usize;
    for &i in idx {
        if argmax(&predict(&shard.x[i])?) == shard.y[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len() as f64)
}

/// Mean over clients of their last communicated model's accuracy on their
/// own split. Returns the mean and the number of clients left out (never
/// sampled or without examples in the split).
pub fn evaluate_local(clients: &[ClientState], shards: &[ShardDataset], split: Split) -> Result<(Option<f64>, usize)> {
    let mut per_client = Vec::with_capacity(clients.len());
    for (c, shard) in clients.iter().zip(shards) {
        match &c.last_communicated {
            Some(snap) if !shard.split(split).is_empty() => {
                per_client.push(Some(accuracy_on(shard, split, |x| predict_snapshot(snap, x))?));
            }
            _ => per_client.push(None),
        }
    }
    Ok(mean_local_accuracy(&per_client))
}

/// `p(z|x) = sum_s p(s) p(z|x,s)` over stored gates and the resulting
/// mixture predictive.
pub fn ensemble_gate_predict(
    x: &[f64],
    gates: &[&LocalGate],
    p_s: &[f64],
    bank: &ExpertBank,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = gates.first().ok_or_else(|| Error::Contract("gate ensemble needs a gate".into()))?;
    if gates.len() != p_s.len() {
        return Err(Error::dim("ensemble weights", gates.len(), p_s.len()));
    }
    let fwd = moe_forward(bank, first, x)?;
    let mut p_z = vec![0.0; bank.k()];
    for (g, &w) in gates.iter().zip(p_s) {
        for (acc, p) in p_z.iter_mut().zip(regate(&fwd, g)?) {
            *acc += w * p;
        }
    }
    let p_y = mix_predictive(&fwd, &p_z);
    Ok((p_z, p_y))
}

/// Accuracy of the server-side model on the pooled split of all shards.
/// Mixtures use the gate ensemble weighted by shard size; biased FedAvg uses
/// the size-weighted mean of the local biases; Local-Global averages the
/// first-layer features of every stored local extractor.
pub fn evaluate_global(
    server: &ServerState,
    clients: &[ClientState],
    shards: &[ShardDataset],
    algorithm: Algorithm,
    split: Split,
) -> Result<Option<f64>> {
    let total: usize = shards.iter().map(|s| s.split(split).len()).sum();
    if total == 0 {
        return Ok(None);
    }
    let spec = &server.bank.spec;
    let weight = |c: &ClientState| shards[c.shard_id].train.len() as f64;
    let predict: Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + '_> = match algorithm {
        Algorithm::Fedmix => {
            let holders: Vec<&ClientState> = clients.iter().filter(|c| c.gate.is_some()).collect();
            let n: f64 = holders.iter().map(|c| weight(c)).sum();
            if holders.is_empty() || n == 0.0 {
                let gate = LocalGate::for_bank(&server.bank);
                Box::new(move |x| mixture_predict(&server.bank, &gate, x))
            } else {
                let gates: Vec<&LocalGate> = holders.iter().map(|c| c.gate.as_ref().unwrap()).collect();
                let p_s: Vec<f64> = holders.iter().map(|c| weight(c) / n).collect();
                Box::new(move |x| Ok(ensemble_gate_predict(x, &gates, &p_s, &server.bank)?.1))
            }
        }
        Algorithm::Fedavg => {
            let params = server.bank.expert(0).unwrap();
            Box::new(move |x| Ok(softmax(&forward(spec, params, x)?.0)))
        }
        Algorithm::BiasedFedavg => {
            let mut params = server.bank.expert(0).unwrap().clone();
            let holders: Vec<&ClientState> = clients.iter().filter(|c| c.local_bias.is_some()).collect();
            let n: f64 = holders.iter().map(|c| weight(c)).sum();
            if n > 0.0 {
                let last = params.blocks().len() - 1;
                let bias = &mut params.blocks_mut()[last].values;
                bias.iter_mut().for_each(|v| *v = 0.0);
                for c in &holders {
                    let w = weight(c) / n;
                    for (b, l) in bias.iter_mut().zip(c.local_bias.as_ref().unwrap()) {
                        *b += w * l;
                    }
                }
            }
            Box::new(move |x| Ok(softmax(&forward(spec, &params, x)?.0)))
        }
        Algorithm::LocalGlobal => {
            let global = server.bank.expert(0).unwrap();
            let extractors: Vec<ParamVector> = clients
                .iter()
                .filter(|c| c.local_layers.is_some())
                .map(|c| merged_params(c, global, algorithm))
                .collect();
            Box::new(move |x| {
                if extractors.is_empty() {
                    return Ok(softmax(&forward(spec, global, x)?.0));
                }
                let mut h = vec![0.0; spec.widths[1]];
                for e in &extractors {
                    for (a, v) in h.iter_mut().zip(hidden_activation(spec, e, x, 0)?) {
                        *a += v / extractors.len() as f64;
                    }
                }
                Ok(softmax(&forward_from(spec, global, 1, &h)?))
            })
        }
    };
    let mut hits = 0usize;
    for shard in shards {
        for &i in shard.split(split) {
            if argmax(&predict(&shard.x[i])?) == shard.y[i] {
                hits += 1;
            }
        }
    }
    Ok(Some(hits as f64 / total as f64))
}

/// Personalizes a copy of the model on one client's training split for
/// `epochs` passes; server state is untouched. Mixtures train the experts,
/// the client's gate and a local copy of φ; baselines train the client's
/// merged parameters.
pub fn finetune(
    client: &ClientState,
    bank: &ExpertBank,
    phi: &PosteriorTable,
    shard: &ShardDataset,
    cfg: &RoundConfig,
    epochs: usize,
) -> Result<Snapshot> {
    if cfg.algorithm.is_mixture() {
        let mut bank = bank.clone();
        let mut phi = phi.clone();
        let mut gate = client.gate.clone().unwrap_or_else(|| LocalGate::for_bank(&bank));
        let opts = TrainOptions {
            epochs,
            train_experts: true,
            train_gate: true,
            update_phi: true,
            shuffle: true,
            round: 0,
            stream_path: vec![u64::MAX, shard.shard_id as u64],
        };
        train_mixture(&mut bank, &mut gate, &mut phi, shard, cfg, &opts)?;
        Ok(Snapshot { bank, gate: Some(gate) })
    } else {
        let global = bank.expert(0).ok_or_else(|| Error::Contract("global model missing".into()))?;
        let mut params = merged_params(client, global, cfg.algorithm);
        train_single(&bank.spec, &mut params, shard, cfg, epochs, 0, &[u64::MAX, shard.shard_id as u64])?;
        Ok(Snapshot {
            bank: ExpertBank {
                spec: bank.spec.clone(),
                experts: vec![Some(params)],
            },
            gate: None,
        })
    }
}

/// Trains a fresh gate for an unseen client with the experts frozen. The
/// client adapts its own copy of φ by the closed-form step as in training;
/// the shared table is not modified.
pub fn fit_new_client_gate(
    shard: &ShardDataset,
    bank: &ExpertBank,
    phi: &PosteriorTable,
    cfg: &RoundConfig,
    epochs: usize,
) -> Result<LocalGate> {
    if shard.train.is_empty() {
        return Err(Error::Contract(format!("shard {} has no training data", shard.shard_id)));
    }
    let mut bank = bank.clone();
    let mut phi = phi.clone();
    let mut gate = LocalGate::for_bank(&bank);
    let opts = TrainOptions {
        epochs,
        train_experts: false,
        train_gate: true,
        update_phi: true,
        shuffle: true,
        round: 0,
        stream_path: vec![u64::MAX - 1, shard.shard_id as u64],
    };
    train_mixture(&mut bank, &mut gate, &mut phi, shard, cfg, &opts)?;
    Ok(gate)
}
