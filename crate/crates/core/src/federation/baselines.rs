use rand::seq::SliceRandom;

use super::{Algorithm, ClientReport, ClientState, RoundConfig, Snapshot};
use crate::data::ShardDataset;
use crate::error::{Error, Result};
use crate::moe::{accumulate_loglik_grad, ExpertBank};
use crate::numerics::{forward, rng, MlpSpec, ParamVector};

/// Per block: `true` if the block is communicated and averaged.
/// Biased FedAvg keeps the output bias local; Local-Global keeps the first
/// layer (weight and bias) local.
pub fn shared_mask(algorithm: Algorithm, spec: &MlpSpec) -> Vec<bool> {
    let blocks = 2 * spec.num_layers();
    (0..blocks)
        .map(|b| match algorithm {
            Algorithm::Fedmix | Algorithm::Fedavg => true,
            Algorithm::BiasedFedavg => b != blocks - 1,
            Algorithm::LocalGlobal => b >= 2,
        })
        .collect()
}

pub(crate) fn select_blocks(p: &ParamVector, mask: &[bool]) -> ParamVector {
    ParamVector::new(
        p.blocks()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(b, _)| b.clone())
            .collect(),
    )
}

/// Overwrites the blocks of `dst` where `mask` is false with `src`'s blocks.
pub(crate) fn copy_local_blocks(dst: &mut ParamVector, src: &ParamVector, mask: &[bool]) {
    for ((d, s), &m) in dst.blocks_mut().iter_mut().zip(src.blocks()).zip(mask) {
        if !m {
            d.values.clone_from(&s.values);
        }
    }
}

/// Client parameters: the global model with this client's local blocks.
pub(crate) fn merged_params(client: &ClientState, global: &ParamVector, algorithm: Algorithm) -> ParamVector {
    let mut params = global.clone();
    match algorithm {
        Algorithm::BiasedFedavg => {
            if let Some(bias) = &client.local_bias {
                let last = params.blocks().len() - 1;
                params.blocks_mut()[last].values.clone_from(bias);
            }
        }
        Algorithm::LocalGlobal => {
            if let Some(local) = &client.local_layers {
                for (d, s) in params.blocks_mut().iter_mut().zip(local.blocks()) {
                    d.values.clone_from(&s.values);
                }
            }
        }
        Algorithm::Fedmix | Algorithm::Fedavg => {}
    }
    params
}

/// Mini-batch ascent on the mean log-likelihood of the train split.
pub(crate) fn train_single(
    spec: &MlpSpec,
    params: &mut ParamVector,
    shard: &ShardDataset,
    cfg: &RoundConfig,
    epochs: usize,
    round: usize,
    stream_path: &[u64],
) -> Result<()> {
    let mut order = shard.train.clone();
    for epoch in 0..epochs {
        let mut path = stream_path.to_vec();
        path.push(epoch as u64);
        order.shuffle(&mut rng::stream(cfg.seed, "batching", &path));
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = params.zeros_like();
            for &i in batch {
                let (logits, cache) = forward(spec, params, &shard.x[i])?;
                accumulate_loglik_grad(spec, params, &logits, &cache, shard.y[i], 1.0, None, &mut grad)?;
            }
            grad.scale(1.0 / batch.len() as f64);
            params.axpy(cfg.lr_client, &grad);
        }
    }
    if !params.is_finite() {
        return Err(Error::Diverged {
            round,
            detail: format!("shard {}: non-finite parameters", shard.shard_id),
        });
    }
    Ok(())
}

/// FedAvg-family client: E epochs of SGD on cross-entropy. Local blocks
/// persist in the client state and are replaced by the global values in
/// the report, so they carry no delta and no bytes.
pub fn baseline_client_update(
    client: &mut ClientState,
    global: &ExpertBank,
    shard: &ShardDataset,
    cfg: &RoundConfig,
    round: usize,
) -> Result<Option<ClientReport>> {
    if shard.train.is_empty() {
        log::warn!("shard {} has no training data; skipped", shard.shard_id);
        return Ok(None);
    }
    let spec = &global.spec;
    let global_params = global.expert(0).ok_or_else(|| Error::Contract("global model missing".into()))?;
    let mask = shared_mask(cfg.algorithm, spec);
    let mut params = merged_params(client, global_params, cfg.algorithm);
    train_single(
        spec,
        &mut params,
        shard,
        cfg,
        cfg.local_epochs,
        round,
        &[round as u64, shard.shard_id as u64],
    )?;
    match cfg.algorithm {
        Algorithm::BiasedFedavg => client.local_bias = Some(params.blocks().last().unwrap().values.clone()),
        Algorithm::LocalGlobal => {
            client.local_layers = Some(ParamVector::new(params.blocks()[..2].to_vec()));
        }
        _ => {}
    }
    client.last_communicated = Some(Snapshot {
        bank: ExpertBank {
            spec: spec.clone(),
            experts: vec![Some(params.clone())],
        },
        gate: None,
    });
    let mut sent = params;
    copy_local_blocks(&mut sent, global_params, &mask);
    let bytes = 8 * select_blocks(&sent, &mask).len() as u64;
    Ok(Some(ClientReport {
        shard_id: shard.shard_id,
        experts: vec![Some(sent)],
        phi: None,
        q_z_given_s: vec![1.0],
        n_examples: shard.train.len(),
        bytes_up: bytes,
        bytes_down: bytes,
    }))
}
