use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stremn_cli::commands;

#[derive(Parser)]
#[command(
    name = "stremn",
    version,
    about = "Constant-size space-time memory: train, evaluate, and analyze"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model per the config file.
    Train {
        /// UTF-8 key=value config file with dotted keys.
        #[arg(long)]
        config: PathBuf,
        /// Override a config key (repeatable), e.g. --set memory.policy=oldest
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint and write CSV/JSON reports.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Additionally sweep the slot count K over 3..=7 (vos task).
        #[arg(long)]
        sweep_k: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Run a checkpoint over a dataset and write raw predictions,
    /// rollout logs, and final bank snapshots.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Benchmark read/update latency and peak memory against the
    /// linear-growth baseline.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sequence positions to measure at.
        #[arg(long, default_value = "50,200,500")]
        t: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Build the retention histogram from a rollout log.
    AnalyzeMemory {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset in the DAVIS-style layout.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Run the finite-difference gradient suite and print a pass/fail table.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        precision: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train { config, sets } => commands::cmd_train(config, sets),
        Cmd::Eval { config, checkpoint, sweep_k, sets } => {
            commands::cmd_eval(config, checkpoint, *sweep_k, sets)
        }
        Cmd::Predict { config, checkpoint, sets } => {
            commands::cmd_predict(config, checkpoint, sets)
        }
        Cmd::Bench { config, t, sets } => match commands::parse_t_list(t) {
            Ok(t_list) => commands::cmd_bench(config.as_deref(), &t_list, sets),
            Err(e) => Err(e),
        },
        Cmd::AnalyzeMemory { log, out } => commands::cmd_analyze_memory(log, out.as_deref()),
        Cmd::GenData { seed, out, count, config, sets } => {
            commands::cmd_gen_data(*seed, out, *count, config.as_deref(), sets)
        }
        Cmd::Gradcheck { precision, seed } => commands::cmd_gradcheck(*precision, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            ExitCode::FAILURE
        }
    }
}
