//! Operator CLI: training and evaluation runs, the verification suite,
//! experience-base inspection, and deterministic trajectory replay.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration
//! errors (including unknown config keys).

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use recall_core::config::RunConfig;
use recall_core::expbase::{EntryType, ExperienceBase, Query};
use recall_core::parallel::with_worker_pool;
use recall_core::policy::ActionSpace;
use recall_core::rollout::{read_trajectory_log, replay_record};
use recall_core::trainer::{evaluate, load_checkpoint, train_full, RunSinks};
use recall_core::verify::run_full_suite;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "recall", version, about = "Memory-augmented RL agent with learned retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the environment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the rollout worker count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Cold-start the policy, then run the online co-evolution loop.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output root; run artifacts land in <out>/<run_id>/.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: success rate, rounds, retrievals.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory (policy.bin + base.jsonl + stats.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode count (defaults to the config's eval block).
        #[arg(long)]
        episodes: Option<usize>,
        /// Greedy decoding instead of sampling (true/false).
        #[arg(long)]
        greedy: Option<bool>,
        /// Disable retrieval and start memory (ablation evaluation).
        #[arg(long, default_value_t = false)]
        no_retrieval: bool,
    },
    /// Run the full property suite; nonzero exit on any failure.
    Verify {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// List experience-base entries, optionally scored against a query.
    InspectBase {
        /// Base file (line-delimited records).
        #[arg(long)]
        base: PathBuf,
        /// Optional query text to rank entries against.
        #[arg(long)]
        query: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Re-execute a logged trajectory and check rewards match the log.
    Replay {
        /// Trajectory log (line-delimited records).
        #[arg(long)]
        log: PathBuf,
        /// Trajectory id to replay.
        #[arg(long)]
        id: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Errors that should exit with status 2 instead of 1.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_path(path),
        None => {
            let mut cfg = RunConfig::default();
            cfg.normalize()?;
            Ok(cfg)
        }
    }
    .map_err(|e| anyhow!(ConfigError(e.to_string())))?;
    if let Some(seed) = args.seed {
        cfg.env.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    cfg.validate().map_err(|e| anyhow!(ConfigError(e.to_string())))?;
    Ok(cfg)
}

fn cmd_train(config: ConfigArgs, out: PathBuf) -> anyhow::Result<()> {
    let cfg = load_config(&config)?;
    let run_dir = out.join(&cfg.run_id);
    std::fs::create_dir_all(&run_dir)
        .with_context(|| format!("creating {}", run_dir.display()))?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml_string()?)?;
    let mut metrics =
        std::io::BufWriter::new(std::fs::File::create(run_dir.join("metrics.jsonl"))?);
    let mut trajectories =
        std::io::BufWriter::new(std::fs::File::create(run_dir.join("trajectories.jsonl"))?);

    let output = with_worker_pool(cfg.workers, || {
        let mut sinks = RunSinks {
            metrics: Some(&mut metrics),
            trajectories: Some(&mut trajectories),
            checkpoint_dir: Some(run_dir.join("checkpoints")),
        };
        train_full(&cfg, &mut sinks)
    })?;
    metrics.flush()?;
    trajectories.flush()?;

    let first_nll = output.cold_start_losses.first().copied().unwrap_or(0.0);
    let last_nll = output.cold_start_losses.last().copied().unwrap_or(0.0);
    println!("cold start: nll {first_nll:.4} -> {last_nll:.4}");
    if let Some(last) = output.metrics.last() {
        println!(
            "final iteration {}: success_rate {:.3}, mean_T {:.2}, mean_retrievals {:.2}, base {} entries",
            last.iteration,
            last.success_rate,
            last.mean_t,
            last.mean_retrievals,
            last.base_counts.values().sum::<usize>()
        );
    }
    println!("artifacts written to {}", run_dir.display());
    Ok(())
}

fn cmd_eval(
    config: ConfigArgs,
    checkpoint: PathBuf,
    episodes: Option<usize>,
    greedy: Option<bool>,
    no_retrieval: bool,
) -> anyhow::Result<()> {
    let cfg = load_config(&config)?;
    let (params, base, _stats) = load_checkpoint(&checkpoint, cfg.expbase.dim)?;
    let space = ActionSpace::new(&cfg.env);
    if params.n_actions != space.len() {
        return Err(anyhow!(
            "checkpoint has {} actions but the config implies {}",
            params.n_actions,
            space.len()
        ));
    }
    let layout = recall_core::policy::FeatureLayout::new(&cfg.env);
    if params.n_features != layout.dim() {
        return Err(anyhow!(
            "checkpoint has {} features but the config implies {}",
            params.n_features,
            layout.dim()
        ));
    }
    let n = episodes.unwrap_or(cfg.eval.episodes);
    let greedy = greedy.unwrap_or(cfg.eval.greedy);
    let summary = with_worker_pool(cfg.workers, || {
        evaluate(&cfg, &params, &base, n, greedy, !no_retrieval)
    })?;
    println!("{}", serde_json::to_string(&summary)?);
    println!(
        "episodes {}: success_rate {:.3}, mean_rounds {:.2}, mean_retrievals {:.2} ({:.2} per success)",
        summary.episodes,
        summary.success_rate,
        summary.mean_rounds,
        summary.mean_retrievals,
        summary.mean_retrievals_per_success
    );
    Ok(())
}

fn cmd_verify(config: ConfigArgs) -> anyhow::Result<()> {
    let cfg = load_config(&config)?;
    let reports = with_worker_pool(cfg.workers, || run_full_suite(cfg.env.seed));
    let mut failed = false;
    for report in &reports {
        println!("{}", serde_json::to_string(report)?);
        eprintln!(
            "{} {:<22} checked={:<7} violations={} ({} ms)",
            if report.is_ok() { "ok  " } else { "FAIL" },
            report.name,
            report.checked,
            report.violation_count,
            report.elapsed_ms
        );
        failed |= !report.is_ok();
    }
    if failed {
        return Err(anyhow!("verification suite reported failures"));
    }
    Ok(())
}

fn cmd_inspect_base(
    base_path: PathBuf,
    query: Option<String>,
    config: ConfigArgs,
) -> anyhow::Result<()> {
    let cfg = load_config(&config)?;
    let file = std::fs::File::open(&base_path)
        .with_context(|| format!("opening {}", base_path.display()))?;
    let base = ExperienceBase::load(std::io::BufReader::new(file), cfg.expbase.dim)?;
    let query = query.map(|q| Query::encode(q, cfg.expbase.dim)).transpose()?;
    println!("{} entries", base.len());
    for &ty in EntryType::ALL.iter() {
        let mut entries: Vec<_> = base.entries().iter().filter(|e| e.type_label == ty).collect();
        if entries.is_empty() {
            continue;
        }
        match &query {
            Some(q) => {
                entries.sort_by(|a, b| {
                    let sa = recall_core::expbase::score(q, a, cfg.expbase.lambda_p);
                    let sb = recall_core::expbase::score(q, b, cfg.expbase.lambda_p);
                    sb.partial_cmp(&sa).unwrap().then(a.id.0.cmp(&b.id.0))
                });
                println!("[{ty}] ({} entries, scored)", entries.len());
                for e in entries {
                    let s = recall_core::expbase::score(q, e, cfg.expbase.lambda_p);
                    println!(
                        "  {:8.4}  p={:<3} #{:<5} {:?} :: {:?}",
                        s, e.priority, e.id.0, e.when_to_use, e.content
                    );
                }
            }
            None => {
                println!("[{ty}] ({} entries)", entries.len());
                for e in entries {
                    println!(
                        "  p={:<3} #{:<5} {:?} :: {:?}",
                        e.priority, e.id.0, e.when_to_use, e.content
                    );
                }
            }
        }
    }
    Ok(())
}

fn cmd_replay(log: PathBuf, id: String, config: ConfigArgs) -> anyhow::Result<()> {
    let cfg = load_config(&config)?;
    let file = std::fs::File::open(&log).with_context(|| format!("opening {}", log.display()))?;
    let records = read_trajectory_log(std::io::BufReader::new(file))?;
    let record = records
        .iter()
        .find(|r| r.traj_id == id)
        .ok_or_else(|| anyhow!("trajectory id {id:?} not found in {}", log.display()))?;
    let space = ActionSpace::new(&cfg.env);
    replay_record(&cfg.env, &space, record)?;
    println!(
        "replay ok: {} (task {}, family {}, T={}, success={}, R_env={})",
        record.traj_id, record.task_id, record.family, record.t, record.success, record.r_env
    );
    Ok(())
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Eval { config, checkpoint, episodes, greedy, no_retrieval } => {
            cmd_eval(config, checkpoint, episodes, greedy, no_retrieval)
        }
        Command::Verify { config } => cmd_verify(config),
        Command::InspectBase { base, query, config } => cmd_inspect_base(base, query, config),
        Command::Replay { log, id, config } => cmd_replay(log, id, config),
    }
}

fn main() -> ExitCode {
    // Die quietly when a pager or `head` closes stdout.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let is_config = err.chain().any(|c| c.is::<ConfigError>())
                || matches!(
                    err.downcast_ref::<recall_core::Error>(),
                    Some(recall_core::Error::Config(_))
                );
            if is_config {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
