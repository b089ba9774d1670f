use rand::seq::SliceRandom;

use super::{ClientReport, ClientState, RoundConfig, Snapshot};
use crate::data::{ShardDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::payload_bytes;
use crate::moe::{lower_bound_from_forwards, moe_forward, BoundOptions, ExpertBank, LocalGate, MoeForward};
use crate::numerics::rng;
use crate::posterior::{closed_form_phi, dampen, marginal_q_z_given_s, PosteriorTable};

/// Experts kept by a client: `q(z=k|s) >= eta / K`.
pub fn prune_filter(q_z_given_s: &[f64], eta: f64, k: usize) -> Vec<bool> {
    let threshold = eta / k as f64;
    q_z_given_s.iter().map(|&q| q >= threshold).collect()
}

/// What a pass of [`train_mixture`] may change.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub train_experts: bool,
    pub train_gate: bool,
    pub update_phi: bool,
    /// Shuffle every epoch; otherwise batches follow the train split order.
    pub shuffle: bool,
    /// Round reported in divergence errors.
    pub round: usize,
    /// Path of the batch-order stream (epoch is appended).
    pub stream_path: Vec<u64>,
}

fn log_joint_rows(forwards: &[MoeForward], ys: &[usize], active: &[bool]) -> Vec<Vec<f64>> {
    forwards
        .iter()
        .zip(ys)
        .map(|(f, &y)| {
            f.log_joints(y)
                .into_iter()
                .zip(active)
                .filter(|(_, &a)| a)
                .map(|(v, _)| v.expect("active experts are present"))
                .collect()
        })
        .collect()
}

/// Runs `opts.epochs` passes of mini-batch ascent on the client bound: per
/// batch, closed-form φ with dampening, then one gradient step on the
/// experts and the gate. With `cfg.eta > 0` the active expert set is
/// recomputed per batch from the current `q(z|s)` and the closed form is
/// restricted to it. Returns the last batch bound.
pub fn train_mixture(
    bank: &mut ExpertBank,
    gate: &mut LocalGate,
    phi: &mut PosteriorTable,
    shard: &ShardDataset,
    cfg: &RoundConfig,
    opts: &TrainOptions,
) -> Result<Option<f64>> {
    let key = cfg.side_info;
    let counts = shard.category_counts(key, Split::Train);
    let k = bank.k();
    let bound_opts = BoundOptions {
        gate_through_features: cfg.gate_through_features,
    };
    let mut last = None;
    let mut order = shard.train.clone();
    for epoch in 0..opts.epochs {
        if opts.shuffle {
            let mut path = opts.stream_path.clone();
            path.push(epoch as u64);
            order.shuffle(&mut rng::stream(cfg.seed, "batching", &path));
        }
        for batch in order.chunks(cfg.batch_size) {
            let present = bank.present();
            let active: Vec<bool> = if cfg.eta > 0.0 {
                let q = marginal_q_z_given_s(phi, &counts)?;
                prune_filter(&q, cfg.eta, k).iter().zip(&present).map(|(&a, &p)| a && p).collect()
            } else {
                present.clone()
            };
            if !active.iter().any(|&a| a) {
                log::warn!("shard {}: no active expert; batch skipped", shard.shard_id);
                continue;
            }
            let forwards = batch
                .iter()
                .map(|&i| moe_forward(bank, gate, &shard.x[i]))
                .collect::<Result<Vec<_>>>()?;
            let ys: Vec<usize> = batch.iter().map(|&i| shard.y[i]).collect();
            let cats: Vec<usize> = batch.iter().map(|&i| shard.category(key, i)).collect();
            let lj = log_joint_rows(&forwards, &ys, &active);
            if lj.iter().flatten().any(|v| v.is_nan()) {
                return Err(Error::Diverged {
                    round: opts.round,
                    detail: format!("shard {}: NaN log-joint", shard.shard_id),
                });
            }

            let grad = if active.iter().all(|&a| a) {
                if opts.update_phi {
                    let rows = closed_form_phi(&lj, &cats, cfg.beta_entropy)?;
                    dampen(phi, &rows, cfg.gamma)?;
                }
                let rows: Vec<Vec<f64>> = cats.iter().map(|&c| phi.row(c).to_vec()).collect();
                lower_bound_from_forwards(bank, gate, &forwards, &ys, &rows, &rows, bound_opts)?
            } else {
                if opts.update_phi {
                    let new_rows = closed_form_phi(&lj, &cats, cfg.beta_entropy)?;
                    for (c, sub) in new_rows {
                        let old = phi.row(c).to_vec();
                        let mass: f64 = old.iter().zip(&active).filter(|(_, &a)| a).map(|(v, _)| v).sum();
                        let mut it = sub.into_iter();
                        let row: Vec<f64> = old
                            .iter()
                            .zip(&active)
                            .map(|(&o, &a)| {
                                if a {
                                    cfg.gamma * o + (1.0 - cfg.gamma) * mass * it.next().unwrap()
                                } else {
                                    o
                                }
                            })
                            .collect();
                        phi.set_row(c, row);
                    }
                }
                let mut kept = Vec::with_capacity(batch.len());
                let mut lik_rows = Vec::with_capacity(batch.len());
                let mut gate_rows = Vec::with_capacity(batch.len());
                for (j, &c) in cats.iter().enumerate() {
                    let row = phi.row(c);
                    let mass: f64 = row.iter().zip(&active).filter(|(_, &a)| a).map(|(v, _)| v).sum();
                    if !(mass > 0.0) {
                        continue;
                    }
                    kept.push(j);
                    lik_rows.push(row.iter().zip(&active).map(|(&v, &a)| if a { v / mass } else { 0.0 }).collect());
                    gate_rows.push(row.to_vec());
                }
                if kept.is_empty() {
                    log::warn!("shard {}: batch has no mass on active experts; skipped", shard.shard_id);
                    continue;
                }
                if kept.len() < batch.len() {
                    log::warn!(
                        "shard {}: {} examples without active mass skipped",
                        shard.shard_id,
                        batch.len() - kept.len()
                    );
                    let fw: Vec<MoeForward> = kept.iter().map(|&j| forwards[j].clone()).collect();
                    let ys: Vec<usize> = kept.iter().map(|&j| ys[j]).collect();
                    lower_bound_from_forwards(bank, gate, &fw, &ys, &lik_rows, &gate_rows, bound_opts)?
                } else {
                    lower_bound_from_forwards(bank, gate, &forwards, &ys, &lik_rows, &gate_rows, bound_opts)?
                }
            };
            if !grad.bound.is_finite() {
                return Err(Error::Diverged {
                    round: opts.round,
                    detail: format!("shard {}: non-finite client bound", shard.shard_id),
                });
            }
            last = Some(grad.bound);
            if opts.train_experts {
                for (e, g) in bank.experts.iter_mut().zip(&grad.grad_bank) {
                    if let (Some(e), Some(g)) = (e.as_mut(), g) {
                        e.axpy(cfg.lr_client, g);
                    }
                }
            }
            if opts.train_gate {
                gate.axpy(cfg.lr_client, &grad.grad_gate);
            }
        }
    }
    if !bank.is_finite() || !gate.is_finite() || !phi.is_finite() {
        return Err(Error::Diverged {
            round: opts.round,
            detail: format!("shard {}: non-finite parameters", shard.shard_id),
        });
    }
    Ok(last)
}

/// One mixture client round. `bank` is what the server transmitted (absent
/// slots were filtered out). Returns `None` for a shard without training data.
pub fn client_update(
    client: &mut ClientState,
    bank: &ExpertBank,
    phi: &PosteriorTable,
    shard: &ShardDataset,
    cfg: &RoundConfig,
    round: usize,
) -> Result<Option<ClientReport>> {
    if shard.train.is_empty() {
        log::warn!("shard {} has no training data; skipped", shard.shard_id);
        return Ok(None);
    }
    let bytes_down = bank.experts.iter().flatten().map(payload_bytes).sum::<u64>() + phi.byte_size() as u64;
    let mut local_bank = bank.clone();
    let mut local_phi = phi.clone();
    let mut gate = client.gate.take().unwrap_or_else(|| LocalGate::for_bank(bank));
    let opts = TrainOptions {
        epochs: cfg.local_epochs,
        train_experts: true,
        train_gate: true,
        update_phi: true,
        shuffle: true,
        round,
        stream_path: vec![round as u64, shard.shard_id as u64],
    };
    let result = train_mixture(&mut local_bank, &mut gate, &mut local_phi, shard, cfg, &opts);
    client.gate = Some(gate.clone());
    result?;
    let counts = shard.category_counts(cfg.side_info, Split::Train);
    let q = marginal_q_z_given_s(&local_phi, &counts)?;
    let keep: Vec<bool> = prune_filter(&q, cfg.eta, bank.k())
        .iter()
        .zip(local_bank.present())
        .map(|(&a, p)| a && p)
        .collect();
    let returned = local_bank.restrict(&keep);
    let bytes_up =
        returned.experts.iter().flatten().map(payload_bytes).sum::<u64>() + local_phi.byte_size() as u64;
    client.last_communicated = Some(Snapshot {
        bank: if returned.experts.iter().any(Option::is_some) {
            returned.clone()
        } else {
            local_bank
        },
        gate: Some(gate),
    });
    Ok(Some(ClientReport {
        shard_id: shard.shard_id,
        experts: returned.experts,
        phi: Some(local_phi),
        q_z_given_s: q,
        n_examples: shard.train.len(),
        bytes_up,
        bytes_down,
    }))
}
