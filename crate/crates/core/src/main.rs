use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mqgrad::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mqgrad", about = "Simulated parameter-server training with learned gradient bit widths")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its trace and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several experiments and tabulate accuracy and loss at time budgets.
    Sweep {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        /// Comma-separated simulated-time budgets in milliseconds.
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<f64>,
        /// Where to write `sweep.csv`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Recompute a summary from a trace CSV and the files next to it.
    Summarize {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn run(cli: Cli) -> mqgrad::Result<()> {
    match cli.cmd {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let art = experiment::run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&art.summary)?);
        }
        Command::Sweep { configs, budgets, out } => {
            let cfgs = configs
                .iter()
                .map(|p| ExperimentConfig::load(p))
                .collect::<mqgrad::Result<Vec<_>>>()?;
            let (table, _) = experiment::run_sweep(&cfgs, &budgets)?;
            std::fs::create_dir_all(&out).map_err(|e| mqgrad::Error::Io {
                path: out.clone(),
                source: e,
            })?;
            experiment::sweep::write_table(&out.join("sweep.csv"), &table)?;
            print!("{}", table.to_csv());
        }
        Command::Summarize { trace } => {
            let summary = experiment::summarize_dir(&trace)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
