use clap::Parser;
use nlmevem_cli::commands::{
    self, cmd_ebe, cmd_fit, cmd_loglik, cmd_simulate, EbeArgs, FitArgs, LoglikArgs, SimulateArgs,
};
use nlmevem_cli::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "nlmevem",
    version,
    about = "Variational EM fitting for nonlinear mixed-effects models",
    after_help = commands::after_help()
)]
struct Cli {
    /// Worker threads for subject-level parallelism (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Fit a model to a dataset and write the result JSON
    Fit(FitArgs),
    /// Draw a synthetic population onto a design and write the dataset CSV
    Simulate(SimulateArgs),
    /// Evaluate a marginal log-likelihood approximation at a fitted result
    Loglik(LoglikArgs),
    /// Extract per-subject empirical Bayes estimates as CSV
    Ebe(EbeArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Loglik(args) => cmd_loglik(args),
        Command::Ebe(args) => cmd_ebe(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
