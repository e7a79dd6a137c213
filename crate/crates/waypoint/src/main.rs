use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use waypoint::config::ExperimentConfig;
use waypoint::io::Logger;
use waypoint::pipeline::{self, Context, Sweep};
use waypoint::{Error, Result};

/// Train and evaluate the waypoint navigation transformer.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to resume from, fine-tune from, or evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Override the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for the config's relative data/checkpoint/report directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate worlds and the train / val_seen / val_unseen splits.
    Gen,
    /// Offline pre-training on expert trajectories.
    Pretrain {
        /// Stop after this many iterations (a multiple of eval_every).
        #[arg(long)]
        until: Option<usize>,
    },
    /// Online fine-tuning; without --checkpoint this is the FT-only arm.
    Finetune {
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate --checkpoint on both validation splits.
    Eval {
        /// Replay the expert instead of a model.
        #[arg(long)]
        expert: bool,
    },
    /// Train one model per setting and tabulate SR/SPL.
    Ablate {
        #[arg(value_enum)]
        sweep: Sweep,
    },
    /// Print the effective config.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s)?;
    }
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let stage = match &cli.command {
        Command::Gen => "gen",
        Command::Pretrain { .. } => "pretrain",
        Command::Finetune { .. } => "finetune",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Config => unreachable!(),
    };
    let log_path = cfg.paths.under(&cli.out).report_dir.join(format!("{}.log", stage));
    let log = Logger::new(Some(&log_path), false)?;
    let mut ctx = Context::new(cfg, &cli.out, cli.force, log);
    ctx.log.log("start", &[("stage", stage.into()), ("config_hash", waypoint::config::hex(ctx.cfg.hash()))]);
    let ck = cli.checkpoint.as_deref();
    match cli.command {
        Command::Gen => {
            pipeline::gen(&mut ctx)?;
        }
        Command::Pretrain { until } => {
            pipeline::pretrain(&mut ctx, ck, until)?;
        }
        Command::Finetune { until } => {
            pipeline::finetune(&mut ctx, ck, until)?;
        }
        Command::Eval { expert } => {
            let r = pipeline::eval(&mut ctx, ck, expert)?;
            print!("{}", r.table());
        }
        Command::Ablate { sweep } => {
            pipeline::ablate(&mut ctx, sweep)?;
        }
        Command::Config => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            exit(&e)
        }
    }
}

fn exit(e: &Error) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
