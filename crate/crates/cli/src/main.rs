use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geomc_cli::compare::{compare_experiments, to_csv};
use geomc_cli::experiment::{run_chains, run_experiment, thread_limit, Summary};
use geomc_cli::simulate::simulate;
use geomc_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "geodesic-mc", version, about = "Riemannian manifold MCMC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Independent replicate chains with seeds seed, seed + 1, ...
        #[arg(long, default_value_t = 1)]
        chains: usize,
    },
    /// Tabulate efficiency across summary.json files of one model/dataset.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic dataset (stochvol, lgcp or fhn) as CSV.
    Simulate {
        model: String,
        /// `key=value` generator parameters, e.g. `t=500 seed=1`.
        params: Vec<String>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, chains } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            if chains == 1 {
                let s = run_experiment(&cfg)?;
                eprintln!(
                    "{} / {}: acceptance {:.3}, min ESS {:.1}, written to {}",
                    s.model,
                    s.sampler,
                    s.acceptance_rate,
                    s.ess.min,
                    cfg.output.display()
                );
            } else {
                let summaries = run_chains(&cfg, chains, thread_limit()?)?;
                eprintln!("{} chains written to {}", summaries.len(), cfg.output.display());
            }
            Ok(())
        }
        Command::Compare { summaries, output } => {
            let loaded: Vec<Summary> = summaries.iter().map(|p| Summary::read(p)).collect::<Result<_, _>>()?;
            let csv = to_csv(&compare_experiments(&loaded)?);
            match output {
                Some(path) => std::fs::write(&path, csv)
                    .map_err(|e| CliError::Io {
                        context: format!("writing {}", path.display()),
                        source: e,
                    }),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::Simulate { model, params, output } => {
            let csv = simulate(&model, &params)?;
            std::fs::write(&output, csv).map_err(|e| CliError::Io {
                context: format!("writing {}", output.display()),
                source: e,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
