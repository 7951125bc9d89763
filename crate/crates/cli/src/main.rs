use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gclrec::Error;

mod commands;
mod manifest;

/// Graph contrastive recommendation: LightGCN, SGL, SimGCL and XSimGCL.
#[derive(Debug, Parser)]
#[command(name = "gclrec", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Seed for splitting, initialization and sampling; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for ranking and propagation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Record that the run must be reproducible. Results never depend on the thread count.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split an interaction log 7:1:2 per user and write train/valid/test files.
    Prepare(commands::PrepareArgs),
    /// Train one model and write its checkpoint, trace and embeddings.
    Train(commands::TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(commands::EvalArgs),
    /// Time forward and backward passes per method on identical batches.
    Bench(commands::BenchArgs),
    /// Train one model per grid cell and collect the metrics.
    Sweep(commands::SweepArgs),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Parse { .. } | Error::Io { .. } | Error::Data(_) | Error::Dimension(_) => 2,
        Error::Numerical(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match &cli.command {
        Command::Prepare(args) => commands::prepare(&cli.global, args),
        Command::Train(args) => commands::train(&cli.global, args),
        Command::Eval(args) => commands::eval(&cli.global, args),
        Command::Bench(args) => commands::bench(&cli.global, args),
        Command::Sweep(args) => commands::sweep(&cli.global, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
