use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dvp_cli::Mode;

#[derive(Parser)]
#[command(name = "dvp", version, about = "Dynamic visual prompting experiments on toy transformers")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads for sweeps and validation scoring.
    #[arg(long, env = "DVP_THREADS", hide = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the synthetic dataset as feature files.
    GenData,
    /// Train at the configured insertion layer.
    Train,
    /// Train once per insertion layer.
    Sweep,
    /// Bandit search over insertion layers.
    Search,
    /// Bandit search against scripted or Bernoulli rewards.
    BanditTest,
    /// Analytic MAC counts per strategy and layer.
    Flops,
    /// Dump per-layer attention maps for one example.
    DumpAttn,
}

fn mode(c: Command) -> Mode {
    match c {
        Command::GenData => Mode::GenData,
        Command::Train => Mode::Train,
        Command::Sweep => Mode::Sweep,
        Command::Search => Mode::Search,
        Command::BanditTest => Mode::BanditTest,
        Command::Flops => Mode::Flops,
        Command::DumpAttn => Mode::DumpAttn,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: DVP_THREADS: {e}");
            return ExitCode::FAILURE;
        }
    }
    let mode = mode(cli.command);
    let result = dvp_cli::resolve_config(cli.config.as_deref(), cli.seed, cli.out)
        .and_then(|cfg| dvp_cli::run(mode, &cfg, cli.quiet));
    match result {
        Ok(summary) => {
            if !cli.quiet {
                println!("{}: {summary}", mode.name());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
