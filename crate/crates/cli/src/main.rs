mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{PayoffChoice, Profile};

#[derive(Debug, Parser)]
#[command(name = "garch-lrm", version, about = "Price and hedge European options on GARCH assets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, clap::Args)]
pub struct GlobalArgs {
    /// Run profile; overrides the config's `profile`.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    /// Seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `[output].dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run even when the cost estimate exceeds the budget.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads (speed only, never results).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stationarity, moment conditions and kurtosis of the model.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time-0 price and hedge ratio by risk-neutral Monte Carlo.
    Price {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        payoff: Option<PayoffChoice>,
        #[arg(long)]
        strike: Option<f64>,
        #[arg(long)]
        maturity: Option<usize>,
        #[arg(long)]
        n_paths: Option<usize>,
    },
    /// Hedging-error backtest.
    Backtest {
        #[arg(long)]
        config: PathBuf,
    },
    /// Exact lattice and quadrature checks.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate paths and write them as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Validate { config } => commands::validate(config, &cli.global),
        Command::Price {
            config,
            payoff,
            strike,
            maturity,
            n_paths,
        } => commands::price(
            config,
            &cli.global,
            commands::PriceOverrides {
                payoff: *payoff,
                strike: *strike,
                maturity: *maturity,
                n_paths: *n_paths,
            },
        ),
        Command::Backtest { config } => commands::backtest(config, &cli.global),
        Command::Oracle { config } => commands::oracle(config, &cli.global),
        Command::Simulate { config } => commands::simulate(config, &cli.global),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
