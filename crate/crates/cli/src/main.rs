use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ppfl::commands::{self, Command, SweepParam};

#[derive(Parser)]
#[command(name = "ppfl", version, about = "Privacy-preserving federated learning simulator and bound checker")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the federated training loop and write per-round metrics and bounds.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate every inequality on the toy instance.
    VerifyBounds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trade-off curves over noise variance or budget.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["noise", "budget"])]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, config, out) = match cli.command {
        Cmd::Simulate { config, out, seed } => (Command::Simulate { seed }, config, out),
        Cmd::VerifyBounds { config, out } => (Command::VerifyBounds, config, out),
        Cmd::Sweep { config, param, grid, out } => {
            let param: SweepParam = param.parse().expect("restricted by clap");
            match commands::parse_grid(&grid) {
                Ok(grid) => (Command::Sweep { param, grid }, config, out),
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(commands::EXIT_CONFIG as u8);
                }
            }
        }
    };
    ExitCode::from(commands::run(&command, &config, &out) as u8)
}
