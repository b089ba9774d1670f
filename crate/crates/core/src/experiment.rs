//! End-to-end runner: data, rounds, periodic evaluation and output files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{make_blobs, partition, Partition, Split};
use crate::error::{Error, Result};
use crate::federation::{
    baseline_client_update, client_update, evaluate_global, evaluate_local, finetune, fit_new_client_gate,
    predict_snapshot, sample_clients, save_checkpoint, server_round, transmission_mask, Checkpoint, ClientReport,
    ClientState, RoundConfig, RoundSummary, ServerState, Snapshot,
};
use crate::metrics::{
    argmax, clustering_score, l1_distance, mean_local_accuracy, privacy_reconstruct, ReconstructionMode,
    RoundMetrics, SlidingWindow, GD_WINDOW,
};
use crate::moe::mixture_predict;
use crate::numerics::MlpSpec;
use crate::posterior::SNAPSHOT_HEADER;

pub const QZS_HEADER: &str = "round,shard,expert,prob";

/// Builds the dataset and partition described by a config.
pub fn build_partition(cfg: &ExperimentConfig) -> Result<Partition> {
    let d = &cfg.dataset;
    let ds = make_blobs(d.classes, d.dim, d.n, d.spread, cfg.seed)?;
    partition(&ds, &cfg.partition_spec())
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub round_config: RoundConfig,
    pub data: Partition,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Per-round divergence (`None` when undefined).
    pub gd_history: Vec<Option<f64>>,
    pub gd_window_history: Vec<Option<f64>>,
    pub metrics: Vec<RoundMetrics>,
    /// Rows of the φ snapshot file (without header).
    pub phi_snapshots: Vec<String>,
    pub qzs_snapshots: Vec<String>,
    window: SlidingWindow,
    pool: Option<rayon::ThreadPool>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, jobs: usize) -> Result<Self> {
        config.validate()?;
        let data = build_partition(&config)?;
        let round_config = config.round_config();
        let spec = MlpSpec::new(config.widths())?;
        let categories = match round_config.side_info {
            crate::posterior::SideInfoKey::Label => config.dataset.classes,
            crate::posterior::SideInfoKey::TransformIndex => config.partition.transform_count,
        };
        let server = ServerState::new(spec, round_config.k, categories, config.seed);
        let clients = (0..data.shards.len()).map(ClientState::new).collect();
        let pool = if jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| Error::Contract(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Experiment {
            config,
            round_config,
            data,
            server,
            clients,
            bytes_up: 0,
            bytes_down: 0,
            gd_history: Vec::new(),
            gd_window_history: Vec::new(),
            metrics: Vec::new(),
            phi_snapshots: Vec::new(),
            qzs_snapshots: Vec::new(),
            window: SlidingWindow::new(GD_WINDOW),
            pool,
        })
    }

    /// Resumes from a checkpoint's server and client state.
    pub fn from_checkpoint(config: ExperimentConfig, ck: Checkpoint, jobs: usize) -> Result<Self> {
        let mut exp = Experiment::new(config, jobs)?;
        if ck.server.bank.spec != exp.server.bank.spec || ck.server.bank.k() != exp.server.bank.k() {
            return Err(Error::config("checkpoint", "expert layout does not match the config"));
        }
        if ck.server.phi.categories() != exp.server.phi.categories() || ck.clients.len() != exp.clients.len() {
            return Err(Error::config("checkpoint", "posterior or client count does not match the config"));
        }
        exp.server = ck.server;
        exp.clients = ck.clients;
        Ok(exp)
    }

    pub fn round(&self) -> usize {
        self.server.round
    }

    fn client_reports(&mut self, round: usize) -> Result<Vec<ClientReport>> {
        let cfg = &self.round_config;
        let sampled = sample_clients(self.clients.len(), cfg.clients_per_round, cfg.seed, round);
        let server = &self.server;
        let shards = &self.data.shards;
        let mut chosen: Vec<&mut ClientState> = Vec::with_capacity(sampled.len());
        let mut next = sampled.iter().peekable();
        for c in self.clients.iter_mut() {
            if next.peek() == Some(&&c.shard_id) {
                next.next();
                chosen.push(c);
            }
        }
        let work = |client: &mut ClientState| -> Result<Option<ClientReport>> {
            let shard = &shards[client.shard_id];
            if cfg.algorithm.is_mixture() {
                let keep = transmission_mask(server, client.shard_id, cfg.eta);
                let bank = server.bank.restrict(&keep);
                client_update(client, &bank, &server.phi, shard, cfg, round)
            } else {
                baseline_client_update(client, &server.bank, shard, cfg, round)
            }
        };
        let results: Vec<Result<Option<ClientReport>>> = match &self.pool {
            Some(pool) => pool.install(|| chosen.into_par_iter().map(&work).collect()),
            None => chosen.into_iter().map(work).collect(),
        };
        let mut reports = Vec::with_capacity(results.len());
        for r in results {
            reports.extend(r?);
        }
        Ok(reports)
    }

    /// Runs one round; evaluation and snapshots follow the configured cadence.
    pub fn step(&mut self) -> Result<Option<RoundSummary>> {
        let round = self.server.round;
        let reports = self.client_reports(round)?;
        let summary = if reports.is_empty() {
            log::warn!("round {round}: no client reported");
            self.server.round += 1;
            None
        } else {
            let s = server_round(&mut self.server, &reports, &self.round_config)?;
            self.bytes_up += s.bytes_up;
            self.bytes_down += s.bytes_down;
            Some(s)
        };
        let gd = summary.as_ref().and_then(|s| s.gd);
        if let Some(v) = gd {
            self.window.push(v);
        }
        self.gd_history.push(gd);
        self.gd_window_history.push(self.window.mean());
        let done = self.server.round;
        if done % self.config.eval_every == 0 || done == self.config.rounds {
            let m = self.metrics_row(gd, summary.as_ref().map(|s| s.active_experts_mean))?;
            log::info!(
                "round {done}: local {:?} global {:?} gd {:?}",
                m.local_acc,
                m.global_acc,
                m.gd_window
            );
            self.metrics.push(m);
        }
        let every = self.config.phi_snapshot_every;
        if every > 0 && done % every == 0 && self.round_config.algorithm.is_mixture() {
            self.snapshot_rows(done);
        }
        Ok(summary)
    }

    fn snapshot_rows(&mut self, round: usize) {
        for (c, row) in self.server.phi.rows().iter().enumerate() {
            for (k, p) in row.iter().enumerate() {
                self.phi_snapshots.push(format!("{round},{c},{k},{p}"));
            }
        }
        for (s, q) in &self.server.stored_qzs {
            for (k, p) in q.iter().enumerate() {
                self.qzs_snapshots.push(format!("{round},{s},{k},{p}"));
            }
        }
    }

    /// `q(z|s)` for every shard as last stored by the server (uniform if
    /// the shard never reported).
    pub fn all_qzs(&self) -> Vec<Vec<f64>> {
        let k = self.server.bank.k();
        (0..self.clients.len())
            .map(|s| self.server.stored_qzs.get(&s).cloned().unwrap_or_else(|| vec![1.0 / k as f64; k]))
            .collect()
    }

    pub fn clustering_score(&self) -> Result<Option<f64>> {
        match &self.data.ground_truth {
            Some(gt) if self.round_config.algorithm.is_mixture() => {
                Ok(Some(clustering_score(&self.all_qzs(), gt, self.server.bank.k())?))
            }
            _ => Ok(None),
        }
    }

    pub fn local_accuracy(&self) -> Result<Option<f64>> {
        let (acc, skipped) = evaluate_local(&self.clients, &self.data.shards, Split::Test)?;
        if skipped > 0 {
            log::debug!("{skipped} clients excluded from local accuracy");
        }
        Ok(acc)
    }

    pub fn global_accuracy(&self) -> Result<Option<f64>> {
        evaluate_global(&self.server, &self.clients, &self.data.shards, self.round_config.algorithm, Split::Test)
    }

    fn metrics_row(&self, gd: Option<f64>, active: Option<f64>) -> Result<RoundMetrics> {
        let mixture = self.round_config.algorithm.is_mixture();
        Ok(RoundMetrics {
            round: self.server.round,
            algo: self.round_config.algorithm.as_str().to_string(),
            k: self.round_config.k,
            local_acc: self.local_accuracy()?,
            global_acc: self.global_accuracy()?,
            bytes_up: self.bytes_up,
            bytes_down: self.bytes_down,
            gd,
            gd_window: self.window.mean(),
            phi_entropy: mixture.then(|| self.server.phi.mean_row_entropy()),
            active_experts_mean: active,
            clustering_score: self.clustering_score()?,
        })
    }

    /// Runs until the configured number of rounds.
    pub fn run(&mut self) -> Result<()> {
        while self.server.round < self.config.rounds {
            self.step()?;
        }
        Ok(())
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
        RoundMetrics::write_csv(&self.metrics, &mut w)?;
        w.flush()?;
        let write_rows = |name: &str, header: &str, rows: &[String]| -> Result<()> {
            let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
            writeln!(w, "{header}")?;
            for r in rows {
                writeln!(w, "{r}")?;
            }
            w.flush()?;
            Ok(())
        };
        write_rows("phi_snapshots.csv", SNAPSHOT_HEADER, &self.phi_snapshots)?;
        write_rows("qzs_snapshots.csv", QZS_HEADER, &self.qzs_snapshots)?;
        save_checkpoint(&dir.join("checkpoint"), &self.server, &self.clients, &self.config.hash())
    }
}

/// Runs a full experiment and writes every output under `dir`.
pub fn run_to_dir(config: ExperimentConfig, dir: &Path, jobs: usize) -> Result<Experiment> {
    let mut exp = Experiment::new(config, jobs)?;
    exp.run()?;
    exp.write_outputs(dir)?;
    Ok(exp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub local_acc: Option<f64>,
    pub global_acc: Option<f64>,
    /// Clients left out of the local average.
    pub excluded: usize,
    pub new_client_acc: Option<f64>,
}

/// Evaluates a restored experiment. With `finetune_epochs > 0` every client
/// with a snapshot first personalizes it on its training split. With
/// `new_client`, that shard is treated as unseen: a fresh gate is fitted on
/// its training split and scored on its test split.
pub fn evaluate(exp: &Experiment, finetune_epochs: usize, new_client: Option<(usize, usize)>) -> Result<EvalReport> {
    let shards = &exp.data.shards;
    let (local_acc, excluded) = if finetune_epochs == 0 {
        evaluate_local(&exp.clients, shards, Split::Test)?
    } else {
        finetuned_local(exp, finetune_epochs)?
    };
    let new_client_acc = match new_client {
        None => None,
        Some((s, epochs)) => Some(new_client_accuracy(exp, s, epochs)?),
    };
    Ok(EvalReport {
        local_acc,
        global_acc: exp.global_accuracy()?,
        excluded,
        new_client_acc,
    })
}

fn finetuned_local(exp: &Experiment, finetune_epochs: usize) -> Result<(Option<f64>, usize)> {
    let cfg = &exp.round_config;
    let shards = &exp.data.shards;
    let mut per_client = Vec::with_capacity(exp.clients.len());
    for (client, shard) in exp.clients.iter().zip(shards) {
        let Some(snap) = &client.last_communicated else {
            per_client.push(None);
            continue;
        };
        if shard.test.is_empty() {
            per_client.push(None);
            continue;
        }
        let tuned: Snapshot = if finetune_epochs > 0 {
            let mut c = client.clone();
            if snap.gate.is_some() {
                c.gate = snap.gate.clone();
            }
            finetune(&c, &snap.bank, &exp.server.phi, shard, cfg, finetune_epochs)?
        } else {
            snap.clone()
        };
        let mut hits = 0;
        for &i in &shard.test {
            if argmax(&predict_snapshot(&tuned, &shard.x[i])?) == shard.y[i] {
                hits += 1;
            }
        }
        per_client.push(Some(hits as f64 / shard.test.len() as f64));
    }
    Ok(mean_local_accuracy(&per_client))
}

fn new_client_accuracy(exp: &Experiment, s: usize, epochs: usize) -> Result<f64> {
    let cfg = &exp.round_config;
    let shard = exp
        .data
        .shards
        .get(s)
        .ok_or_else(|| Error::config("new_client", format!("no shard {s}")))?;
    if !cfg.algorithm.is_mixture() {
        return Err(Error::config("new_client", "new-client mode needs a mixture model"));
    }
    let gate = fit_new_client_gate(shard, &exp.server.bank, &exp.server.phi, cfg, epochs)?;
    let idx = if shard.test.is_empty() { &shard.train } else { &shard.test };
    let mut hits = 0;
    for &i in idx {
        if argmax(&mixture_predict(&exp.server.bank, &gate, &shard.x[i])?) == shard.y[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len().max(1) as f64)
}

pub const AUDIT_HEADER: &str = "shard,class,true_p,recon_p,mode";
pub const AUDIT_L1_HEADER: &str = "shard,mode,l1";

#[derive(Debug, Clone, PartialEq)]
pub struct AuditResult {
    pub shard: usize,
    pub mode: ReconstructionMode,
    pub true_p: Vec<f64>,
    pub recon_p: Vec<f64>,
    pub l1: f64,
}

/// Label-marginal reconstruction from the output-bias change of one local
/// update, for every shard. The model's output layer starts at zero so its
/// predictions are uniform. Single-step mode takes one full-batch step;
/// multi-step mode runs the configured epochs and batch size.
pub fn privacy_audit(cfg: &ExperimentConfig) -> Result<Vec<AuditResult>> {
    use crate::numerics::{forward, ParamVector};
    let data = build_partition(cfg)?;
    let rc = cfg.round_config();
    if !(rc.lr_client > 0.0) {
        return Err(Error::config("training.lr_client", "the audit needs lr_client > 0"));
    }
    let spec = MlpSpec::new(cfg.widths())?;
    let mut init = spec.init(&mut crate::numerics::rng::stream(cfg.seed, "init", &[0]));
    let last = spec.num_layers() - 1;
    for b in init.blocks_mut().iter_mut().skip(2 * last) {
        b.values.iter_mut().for_each(|v| *v = 0.0);
    }
    let bias = |p: &ParamVector| p.blocks().last().unwrap().values.clone();
    let mut out = Vec::new();
    for shard in &data.shards {
        if shard.train.is_empty() {
            continue;
        }
        let true_p = shard.label_marginal(Split::Train);
        for mode in [ReconstructionMode::SingleFullBatch, ReconstructionMode::MultiStep] {
            let mut step_cfg = rc.clone();
            let epochs = match mode {
                ReconstructionMode::SingleFullBatch => {
                    step_cfg.batch_size = shard.train.len();
                    1
                }
                ReconstructionMode::MultiStep => rc.local_epochs,
            };
            let mut params = init.clone();
            // Uniform outputs at the start of the update.
            debug_assert!(shard
                .train
                .first()
                .map(|&i| forward(&spec, &params, &shard.x[i]).unwrap().0.iter().all(|&v| v == 0.0))
                .unwrap_or(true));
            crate::federation::train_single_for_audit(&spec, &mut params, shard, &step_cfg, epochs)?;
            let recon_p = privacy_reconstruct(&bias(&init), &bias(&params), rc.lr_client, mode)?;
            let l1 = l1_distance(&true_p, &recon_p);
            out.push(AuditResult {
                shard: shard.shard_id,
                mode,
                true_p: true_p.clone(),
                recon_p,
                l1,
            });
        }
    }
    Ok(out)
}

pub fn write_audit(results: &[AuditResult], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("privacy_audit.csv"))?);
    writeln!(w, "{AUDIT_HEADER}")?;
    for r in results {
        for (c, (t, p)) in r.true_p.iter().zip(&r.recon_p).enumerate() {
            writeln!(w, "{},{c},{t},{p},{}", r.shard, r.mode.as_str())?;
        }
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join("privacy_audit_l1.csv"))?);
    writeln!(w, "{AUDIT_L1_HEADER}")?;
    for r in results {
        writeln!(w, "{},{},{}", r.shard, r.mode.as_str(), r.l1)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean L1 error per reconstruction mode.
pub fn audit_mean_l1(results: &[AuditResult], mode: ReconstructionMode) -> f64 {
    let v: Vec<f64> = results.iter().filter(|r| r.mode == mode).map(|r| r.l1).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Dumps the partition as CSV, plus the cluster of each shard if known.
pub fn write_partition(cfg: &ExperimentConfig, dir: &Path) -> Result<Partition> {
    let data = build_partition(cfg)?;
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("shards.csv"))?);
    crate::data::write_shards_csv(&data.shards, &mut w)?;
    w.flush()?;
    if let Some(gt) = &data.ground_truth {
        let mut w = BufWriter::new(fs::File::create(dir.join("ground_truth.csv"))?);
        writeln!(w, "shard,cluster")?;
        for (s, g) in gt.iter().enumerate() {
            writeln!(w, "{s},{g}")?;
        }
        w.flush()?;
    }
    Ok(data)
}
