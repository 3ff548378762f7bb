use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stmpc_cli::commands::{self, RunOptions};
use stmpc_cli::{CliError, ScenarioFile};

/// Resource-aware self-triggered MPC on scenario files.
#[derive(Debug, Parser)]
#[command(name = "stmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the resource assumptions and report the recovery interval.
    Check {
        scenario: PathBuf,
        /// Print the scenario with every default filled in, then exit.
        #[arg(long)]
        dump_normalized: bool,
    },
    /// Run the closed loop and write logs.
    Run {
        scenario: PathBuf,
        /// Output directory (default: scenario `run.output_dir`, then $STMPC_OUT_DIR, then ./stmpc_out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write trajectory.csv, dense.csv and analysis.csv.
        #[arg(long)]
        csv: bool,
        /// Write plot-ready data series under plots/.
        #[arg(long)]
        plots: bool,
    },
    /// Run one closed loop per value of a scalar scenario key.
    Sweep {
        scenario: PathBuf,
        /// Dotted key, e.g. `resource.refill_rate` or `controller.horizon`.
        #[arg(long)]
        param: String,
        /// Comma-separated TOML scalars.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Check { scenario, dump_normalized } => {
            let file = ScenarioFile::load(&scenario)?;
            if dump_normalized {
                print!("{}", file.normalized()?.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            file.prepare()?;
            let report = commands::check(&file)?;
            print!("{}", commands::format_check(&report));
            Ok(if report.all_hold() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Run { scenario, out, csv, plots } => {
            let file = ScenarioFile::load(&scenario)?;
            let summary = commands::run(&file, &RunOptions { out_dir: out, csv, plots })?;
            print!("{}", commands::format_summary(&summary));
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { scenario, param, values, out } => {
            let text = std::fs::read_to_string(&scenario)
                .map_err(|e| CliError::Config(format!("cannot read scenario {}: {e}", scenario.display())))?;
            let file = ScenarioFile::parse(&text)?;
            let dir = commands::resolve_out_dir(out.as_deref(), &file);
            let rows = commands::sweep(&text, &param, &values, &dir)?;
            for r in &rows {
                println!(
                    "{} = {}: cost {:.6}, average rate {:.6} (bound {:.6}), {} samples, {}",
                    param, r.value, r.total_cost, r.average_rate, r.usage_bound, r.samples, r.status
                );
            }
            println!("wrote {}", dir.join("sweep.csv").display());
            let failed = rows.iter().any(|r| r.status != "ok");
            Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
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
    execute(cli).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(e.exit_code())
    })
}
