use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedmix::config::ExperimentConfig;
use fedmix::experiment::{self, Experiment};
use fedmix::federation::load_checkpoint;
use fedmix::Error;

#[derive(Parser)]
#[command(name = "fedmix", version, about = "Federated mixture-of-experts simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train for the configured number of rounds and write metrics, snapshots and a checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads for client updates; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Report accuracies of a saved checkpoint.
    Eval {
        /// Checkpoint directory (usually `<output>/checkpoint`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Personalization epochs before local evaluation (config value if omitted).
        #[arg(long)]
        finetune_epochs: Option<usize>,
        /// Treat this shard as unseen and fit a fresh gate for it.
        #[arg(long)]
        new_client: Option<usize>,
        /// Append the report to `<output>/eval.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Reconstruct every shard's label marginal from its output-bias update.
    AuditPrivacy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the generated shards to CSV.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn output_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn append_eval(dir: &Path, round: usize, report: &experiment::EvalReport, finetune: usize) -> fedmix::Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("eval.csv");
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "round,finetune_epochs,local_acc,global_acc,excluded,new_client_acc")?;
    }
    writeln!(
        f,
        "{round},{finetune},{},{},{},{}",
        fmt_opt(report.local_acc),
        fmt_opt(report.global_acc),
        report.excluded,
        fmt_opt(report.new_client_acc)
    )?;
    Ok(())
}

fn execute(cmd: Command) -> fedmix::Result<()> {
    match cmd {
        Command::Run { config, jobs, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = output_dir(output, &cfg);
            let exp = experiment::run_to_dir(cfg, &dir, jobs.max(1))?;
            if let Some(last) = exp.metrics.last() {
                println!(
                    "round {} local_acc {} global_acc {} bytes_up {}",
                    last.round,
                    fmt_opt(last.local_acc),
                    fmt_opt(last.global_acc),
                    last.bytes_up
                );
            }
        }
        Command::Eval { checkpoint, config, finetune_epochs, new_client, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ck = load_checkpoint(&checkpoint)?;
            if ck.config_hash != cfg.hash() {
                log::warn!("checkpoint was written with a different config");
            }
            let epochs = finetune_epochs.unwrap_or(cfg.eval.finetune_epochs);
            let new_client = new_client.map(|s| (s, epochs.max(1)));
            let exp = Experiment::from_checkpoint(cfg, ck, 1)?;
            let report = experiment::evaluate(&exp, epochs, new_client)?;
            println!(
                "round {} local_acc {} global_acc {} excluded {}",
                exp.round(),
                fmt_opt(report.local_acc),
                fmt_opt(report.global_acc),
                report.excluded
            );
            if let Some(acc) = report.new_client_acc {
                println!("new_client_acc {acc}");
            }
            if let Some(dir) = output {
                append_eval(&dir, exp.round(), &report, epochs)?;
            }
        }
        Command::AuditPrivacy { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = output_dir(output, &cfg);
            let results = experiment::privacy_audit(&cfg)?;
            experiment::write_audit(&results, &dir)?;
            for mode in [fedmix::metrics::ReconstructionMode::SingleFullBatch, fedmix::metrics::ReconstructionMode::MultiStep] {
                println!("{} mean_l1 {}", mode.as_str(), experiment::audit_mean_l1(&results, mode));
            }
        }
        Command::Partition { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = output_dir(output, &cfg);
            let data = experiment::write_partition(&cfg, &dir)?;
            println!("{} shards written to {}", data.shards.len(), dir.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Dimension { .. } | Error::Layout(_) | Error::Format { .. } => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
