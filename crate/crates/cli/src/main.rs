use clap::{Parser, Subcommand};
use quadworld_cli::commands::{cmd_collect, cmd_eval, cmd_reproduce, cmd_train};
use quadworld_cli::config::{ExperimentConfig, DEFAULT_CONFIG_TOML};
use quadworld_cli::{exit_codes, CliError};
use quadworld::worldmodel::ModelKind;
use std::path::PathBuf;
use std::process::ExitCode;

/// Desk-scale world-model laboratory for a simulated quadcopter: collect
/// chirp-excitation flight data, train physics-structured and recurrent
/// dynamics models, and compare their in- and out-of-distribution rollouts.
#[derive(Parser)]
#[command(name = "quadworld", version, about)]
struct Cli {
    /// Path to the experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fly the excitation protocol and persist the replay buffer plus the
    /// out-of-distribution test episode.
    Collect,
    /// Train one world model on the collected buffer.
    Train {
        /// Model kind: physics | rnn.
        #[arg(long)]
        kind: String,
    },
    /// Evaluate a checkpoint: in-distribution and out-of-distribution reports.
    Eval {
        /// Checkpoint path; defaults to the best checkpoint of --kind.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Expected model kind (also selects the default checkpoint).
        #[arg(long)]
        kind: String,
    },
    /// Collect, train both model kinds, evaluate both, and write a summary.
    /// Exits 0 only if the fit and divergence thresholds hold.
    Reproduce {
        /// Reuse previously collected data.
        #[arg(long)]
        skip_collect: bool,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the canonical default configuration with commentary.
    PrintDefault,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.run.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn parse_kind(s: &str) -> Result<ModelKind, CliError> {
    s.parse().map_err(CliError::Config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Config {
            action: ConfigAction::PrintDefault,
        } => {
            print!("{DEFAULT_CONFIG_TOML}");
            Ok(())
        }
        Command::Collect => {
            let cfg = load_config(&cli)?;
            let out = cmd_collect(&cfg)?;
            println!(
                "collected {} transitions in {} episodes -> {}",
                out.steps,
                out.episodes,
                out.buffer_dir.display()
            );
            println!("ood episode -> {}", out.ood_path.display());
            Ok(())
        }
        Command::Train { kind } => {
            let cfg = load_config(&cli)?;
            let kind = parse_kind(kind)?;
            let out = cmd_train(&cfg, kind)?;
            println!("best checkpoint (update {}): {}", out.best_update, out.best_path.display());
            println!("last checkpoint: {}", out.last_path.display());
            println!("training log: {}", out.log_path.display());
            if let Some(v) = out.final_validation {
                println!(
                    "final held-out validation RMSE: pos {:.4} vel {:.4} att {:.4} rate {:.4}",
                    v[0], v[1], v[2], v[3]
                );
            }
            Ok(())
        }
        Command::Eval { checkpoint, kind } => {
            let cfg = load_config(&cli)?;
            let kind = parse_kind(kind)?;
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.checkpoint_dir().join(format!("{kind}_best.json")));
            let out = cmd_eval(&cfg, &path, Some(kind))?;
            println!("reports -> {}", out.report_dir.display());
            println!(
                "ID buffer   overall: pos {:.4} vel {:.4} att {:.4} rate {:.4}",
                out.id_buffer.overall[0],
                out.id_buffer.overall[1],
                out.id_buffer.overall[2],
                out.id_buffer.overall[3]
            );
            println!(
                "ID held-out overall: pos {:.4} vel {:.4} att {:.4} rate {:.4}",
                out.id_heldout.overall[0],
                out.id_heldout.overall[1],
                out.id_heldout.overall[2],
                out.id_heldout.overall[3]
            );
            for (r, _) in &out.ood {
                println!(
                    "OOD {:>3}-step overall: pos {:.4} vel {:.4} att {:.4} rate {:.4}",
                    r.horizon, r.overall[0], r.overall[1], r.overall[2], r.overall[3]
                );
            }
            Ok(())
        }
        Command::Reproduce { skip_collect } => {
            let cfg = load_config(&cli)?;
            let out = cmd_reproduce(&cfg, *skip_collect)?;
            print!("{}", out.summary);
            println!("summary -> {}", out.summary_path.display());
            if !out.all_pass() {
                std::process::exit(exit_codes::THRESHOLDS);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit_codes::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
