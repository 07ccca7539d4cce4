//! `radar`: build baseline datasets, train the topology generator, sample
//! and execute communication graphs, and run evaluation and robustness
//! sweeps. Every command writes a manifest of resolved settings plus
//! input/output content hashes under the output directory.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use radar_core::config::{RewardSign, TrainConfig};

#[derive(Parser)]
#[command(name = "radar", version, about = "Redundancy-aware multi-agent topology generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file mirroring the training-config field names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,
    /// Drop the effective-size bias from both networks.
    #[arg(long, global = true)]
    no_es: bool,
    /// Disable utility-shaped policy updates during training.
    #[arg(long, global = true)]
    no_utility: bool,
    /// Drop the query conditioning from the denoiser.
    #[arg(long, global = true)]
    no_query: bool,
    /// Effective-size trade-off between incoming and outgoing directions.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Sign convention for the ordering-policy reward.
    #[arg(long, global = true, value_enum)]
    reward_sign: Option<RewardSignArg>,
    /// Evaluate the effective-size bias on the full starting graph instead
    /// of the visible subgraph.
    #[arg(long, global = true)]
    phi_on_g0: bool,
    /// Agents consume previous-round neighbor responses during execution.
    #[arg(long, global = true)]
    stale_neighbors: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardSignArg {
    Pos,
    Neg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task suite and score baseline topologies on it.
    BuildDataset {
        /// Number of synthetic tasks.
        #[arg(long, default_value_t = 50)]
        tasks: usize,
        /// Fraction of easy tasks in the suite.
        #[arg(long, default_value_t = 0.5)]
        easy_fraction: f64,
        /// Comma-separated team sizes to instantiate.
        #[arg(long, default_value = "3,4", value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Train the ordering network and denoiser on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Task suite backing the utility oracle.
        #[arg(long)]
        suite: PathBuf,
        /// Resume from a checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample topologies from a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task id resolved against the suite.
        #[arg(long)]
        task_id: Option<String>,
        /// Free-form query text (embedded with the fallback embedder).
        #[arg(long)]
        query: Option<String>,
        /// Task suite for task-id resolution.
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Optional embedding file (task_id -> vector).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        n_samples: usize,
        /// Fixed node count; defaults to the training size distribution.
        #[arg(long)]
        n_target: Option<usize>,
    },
    /// Execute a topology file over agent backends.
    Execute {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        query: String,
        /// Backend: "mock:echo", "mock:scripted=<answer>", or
        /// "http=<base_url>,<model>".
        #[arg(long, default_value = "mock:echo")]
        backend: String,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long, default_value = "majority_vote")]
        aggregation: String,
    },
    /// Evaluate a checkpoint over a task suite.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// Generations averaged per task row.
        #[arg(long, default_value_t = 1)]
        gens_per_task: usize,
    },
    /// Robustness checks: liar-role prompt attacks and structural noise.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// One of: none, prompt_liar, structure_noise, both.
        #[arg(long, default_value = "prompt_liar")]
        mode: String,
    },
}

fn resolve_config(cli: &Cli) -> Result<TrainConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("read config {}: {e}", path.display()))?;
            TrainConfig::from_toml_str(&text).map_err(|e| e.to_string())?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(beta) = cli.beta {
        cfg.beta = beta;
    }
    if let Some(sign) = cli.reward_sign {
        cfg.reward_sign = match sign {
            RewardSignArg::Pos => RewardSign::Pos,
            RewardSignArg::Neg => RewardSign::Neg,
        };
    }
    cfg.no_es |= cli.no_es;
    cfg.no_utility |= cli.no_utility;
    cfg.no_query |= cli.no_query;
    cfg.phi_on_g0 |= cli.phi_on_g0;
    cfg.stale_neighbors |= cli.stale_neighbors;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_dir = cli.out.clone();
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(message) => {
            // Config errors are still recorded in a manifest when possible.
            let mut manifest = manifest::Manifest::new(
                "config",
                cli.seed.unwrap_or(0),
                serde_json::Value::Null,
            );
            manifest.error = Some(message.clone());
            let _ = manifest.write(&out_dir);
            eprintln!("error: {message}");
            return ExitCode::FAILURE;
        }
    };

    let outcome = match &cli.command {
        Command::BuildDataset {
            tasks,
            easy_fraction,
            sizes,
        } => commands::build_dataset(&cfg, &out_dir, *tasks, *easy_fraction, sizes),
        Command::Train {
            dataset,
            suite,
            resume,
            epochs,
        } => commands::train(&cfg, &out_dir, dataset, suite, resume.as_deref(), *epochs),
        Command::Generate {
            checkpoint,
            task_id,
            query,
            suite,
            embeddings,
            n_samples,
            n_target,
        } => commands::generate(
            &cfg,
            &out_dir,
            checkpoint,
            task_id.as_deref(),
            query.as_deref(),
            suite.as_deref(),
            embeddings.as_deref(),
            *n_samples,
            *n_target,
        ),
        Command::Execute {
            topology,
            query,
            backend,
            rounds,
            aggregation,
        } => commands::execute(&cfg, &out_dir, topology, query, backend, *rounds, aggregation),
        Command::Evaluate {
            checkpoint,
            suite,
            gens_per_task,
        } => commands::evaluate(&cfg, &out_dir, checkpoint, suite, *gens_per_task),
        Command::Attack {
            checkpoint,
            suite,
            mode,
        } => commands::attack(&cfg, &out_dir, checkpoint, suite, mode),
    };

    match outcome {
        Ok(manifest) => match manifest.write(&out_dir) {
            Ok(path) => {
                println!("wrote manifest {}", path.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: write manifest: {e}");
                ExitCode::FAILURE
            }
        },
        Err((mut manifest, message)) => {
            manifest.error = Some(message.clone());
            let _ = manifest.write(&out_dir);
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
