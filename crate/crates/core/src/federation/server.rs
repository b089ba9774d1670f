use super::baselines::{select_blocks, shared_mask};
use super::{ClientReport, RoundConfig, ServerOptimizer, ServerState};
use crate::error::{Error, Result};
use crate::metrics::gradient_divergence;
use crate::moe::ExpertBank;
use crate::numerics::{adam_step, sgd_step, AdamState, ParamVector};
use crate::posterior::{marginal_entropy_grad, project_rows, PosteriorTable};

/// Experts the server sends to `shard_id`: those whose stored `q(z=k|s)`
/// is at least `0.9 * eta / K`. Clients without a stored value get all.
pub fn transmission_mask(server: &ServerState, shard_id: usize, eta: f64) -> Vec<bool> {
    let k = server.bank.k();
    match server.stored_qzs.get(&shard_id) {
        Some(q) if eta > 0.0 => {
            let threshold = 0.9 * eta / k as f64;
            q.iter().map(|&v| v >= threshold).collect()
        }
        _ => vec![true; k],
    }
}

/// `p(s) = N_s / N` over the cohort, and per expert `p(s | z=k)` normalized
/// over the reports that returned expert `k` (`None` when that mass is zero).
pub fn aggregation_weights(reports: &[&ClientReport], k: usize) -> (Vec<f64>, Vec<Option<Vec<f64>>>) {
    let total: usize = reports.iter().map(|r| r.n_examples).sum();
    let p_s: Vec<f64> = reports.iter().map(|r| r.n_examples as f64 / total as f64).collect();
    let per_expert = (0..k)
        .map(|j| {
            let raw: Vec<f64> = reports
                .iter()
                .zip(&p_s)
                .map(|(r, &p)| if r.experts[j].is_some() { r.q_z_given_s[j] * p } else { 0.0 })
                .collect();
            let s: f64 = raw.iter().sum();
            (s > 0.0).then(|| raw.iter().map(|v| v / s).collect())
        })
        .collect();
    (p_s, per_expert)
}

/// Applies a server delta as a gradient to descend.
fn server_step(cfg: &RoundConfig, adam: &mut AdamState, params: &mut ParamVector, delta: &ParamVector) {
    match cfg.server_optimizer {
        ServerOptimizer::Adam => adam_step(adam, params, delta, cfg.lr_server),
        ServerOptimizer::Sgd => sgd_step(params, delta, cfg.lr_server),
    }
}

type Contributions = Vec<Option<Vec<(f64, ParamVector)>>>;

/// Per expert, the weighted client deltas `(p(s|z=k), w_k - w_{k,s})`.
fn contributions(bank: &ExpertBank, reports: &[&ClientReport], per_expert: &[Option<Vec<f64>>]) -> Contributions {
    per_expert
        .iter()
        .enumerate()
        .map(|(j, weights)| {
            let weights = weights.as_ref()?;
            let old = bank.experts[j].as_ref().expect("server bank is full");
            Some(
                reports
                    .iter()
                    .zip(weights)
                    .filter_map(|(r, &w)| r.experts[j].as_ref().map(|new| (w, old.minus(new))))
                    .collect(),
            )
        })
        .collect()
}

fn weighted_sum(contribs: &[(f64, ParamVector)]) -> ParamVector {
    let mut delta = contribs[0].1.zeros_like();
    for (w, d) in contribs {
        delta.axpy(*w, d);
    }
    delta
}

/// `Δ_k = sum_s p(s|z=k) (w_k - w_{k,s})`; `None` for experts nobody returned.
pub fn expert_deltas(bank: &ExpertBank, reports: &[ClientReport]) -> Vec<Option<ParamVector>> {
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.shard_id);
    let (_, per_expert) = aggregation_weights(&sorted, bank.k());
    contributions(bank, &sorted, &per_expert)
        .into_iter()
        .map(|c| c.map(|c| weighted_sum(&c)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    /// Mean over experts with at least two contributors of their divergence.
    pub gd: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub active_experts_mean: f64,
    pub participants: usize,
}

/// Aggregates one cohort. Reports are processed in shard order, so the
/// result does not depend on arrival order.
pub fn server_round(server: &mut ServerState, reports: &[ClientReport], cfg: &RoundConfig) -> Result<RoundSummary> {
    if reports.is_empty() {
        return Err(Error::Contract("server round needs at least one report".into()));
    }
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.shard_id);
    let k = server.bank.k();
    for r in &sorted {
        if r.experts.len() != k || r.q_z_given_s.len() != k {
            return Err(Error::dim("report experts", k, r.experts.len()));
        }
    }
    let (p_s, per_expert) = aggregation_weights(&sorted, k);
    let mask = shared_mask(cfg.algorithm, &server.bank.spec);

    let mut gds = Vec::new();
    for (j, contribs) in contributions(&server.bank, &sorted, &per_expert).into_iter().enumerate() {
        let Some(contribs) = contribs else {
            log::debug!("expert {j} frozen: no contributing client");
            continue;
        };
        let weighted: Vec<&(f64, ParamVector)> = contribs.iter().filter(|(w, _)| *w > 0.0).collect();
        if weighted.len() >= 2 {
            let shared: Vec<ParamVector> = weighted.iter().map(|(_, d)| select_blocks(d, &mask)).collect();
            let refs: Vec<&ParamVector> = shared.iter().collect();
            let w: Vec<f64> = weighted.iter().map(|(w, _)| *w).collect();
            gds.push(gradient_divergence(&refs, &w)?.value);
        }
        let delta = weighted_sum(&contribs);
        let params = server.bank.experts[j].as_mut().unwrap();
        server_step(cfg, &mut server.adam_bank[j], params, &delta);
    }

    let phi_reports: Vec<(&PosteriorTable, f64)> = sorted
        .iter()
        .zip(&p_s)
        .filter_map(|(r, &p)| r.phi.as_ref().map(|phi| (phi, p)))
        .collect();
    if !phi_reports.is_empty() {
        let old = server.phi.to_params();
        let mut delta = old.zeros_like();
        for (phi, p) in &phi_reports {
            delta.axpy(*p, &old.minus(&phi.to_params()));
        }
        if cfg.entropy_regularizer {
            let c = server.phi.categories();
            let grad = marginal_entropy_grad(&server.phi, &vec![1.0 / c as f64; c])?;
            let flat: Vec<f64> = grad.into_iter().flatten().collect();
            for (d, g) in delta.values_mut().zip(flat) {
                *d -= g;
            }
        }
        let mut params = old;
        server_step(cfg, &mut server.adam_phi, &mut params, &delta);
        let mut phi = PosteriorTable::from_params_unchecked(&params)?;
        project_rows(&mut phi);
        server.phi = phi;
    }

    for r in &sorted {
        server.stored_qzs.insert(r.shard_id, r.q_z_given_s.clone());
    }
    server.round += 1;
    if !server.bank.is_finite() || !server.phi.is_finite() {
        return Err(Error::Diverged {
            round: server.round,
            detail: "non-finite server parameters".into(),
        });
    }
    Ok(RoundSummary {
        gd: (!gds.is_empty()).then(|| gds.iter().sum::<f64>() / gds.len() as f64),
        bytes_up: sorted.iter().map(|r| r.bytes_up).sum(),
        bytes_down: sorted.iter().map(|r| r.bytes_down).sum(),
        active_experts_mean: sorted.iter().map(|r| r.returned() as f64).sum::<f64>() / sorted.len() as f64,
        participants: sorted.len(),
    })
}
