//! Command-line front door: scenario ingestion, condition checks, solves,
//! the coupling study, benchmark validation, and the rate table.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfglab::cli::{
    cmd_chaos_study, cmd_check_monotone, cmd_lq_validate, cmd_rate_table, cmd_solve_mkv,
    exit_code_for, load_scenario, OutputFormat,
};

#[derive(Parser)]
#[command(name = "mfglab", about = "Particle solvers and convergence studies for symmetric stochastic differential games with shared noise", version)]
struct Cli {
    /// Worker threads for study-level parallelism (results are identical
    /// for any thread count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every structural condition check applicable to the scenario.
    CheckMonotone {
        #[arg(long)]
        scenario: PathBuf,
        /// Write the report to this file as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the mean-field system and persist the solution.
    SolveMkv {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-population coupling study and emit CSV/SVG outputs.
    ChaosStudy {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "both")]
        format: String,
    },
    /// Validate solvers against the closed-form benchmark.
    LqValidate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Tabulate the moment-dependent rate formula.
    RateTable {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        q: f64,
        /// Comma-separated player counts.
        #[arg(long, default_value = "")]
        ns: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // The pool can only be built once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}

fn run(cli: Cli) -> mfglab::Result<u8> {
    match cli.command {
        Command::CheckMonotone { scenario, out } => {
            let scenario = load_scenario(&scenario, cli.seed)?;
            let (pass, report) = cmd_check_monotone(&scenario)?;
            print!("{report}");
            if let Some(path) = out {
                std::fs::write(path, &report)?;
            }
            Ok(if pass { 0 } else { 1 })
        }
        Command::SolveMkv { scenario, out } => {
            let scenario = load_scenario(&scenario, cli.seed)?;
            let summary = cmd_solve_mkv(&scenario, &out)?;
            print!("{summary}");
            Ok(0)
        }
        Command::ChaosStudy { scenario, out, format } => {
            let scenario = load_scenario(&scenario, cli.seed)?;
            let format = OutputFormat::parse(&format)?;
            let summary = cmd_chaos_study(&scenario, &out, format)?;
            print!("{summary}");
            Ok(0)
        }
        Command::LqValidate { scenario } => {
            let scenario = load_scenario(&scenario, cli.seed)?;
            let (pass, table) = cmd_lq_validate(&scenario)?;
            print!("{table}");
            Ok(if pass { 0 } else { 1 })
        }
        Command::RateTable { n, q, ns } => {
            let ladder: Vec<usize> = ns
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|e| mfglab::MfgError::InvalidParams {
                        detail: format!("bad ladder entry '{s}': {e}"),
                    })
                })
                .collect::<mfglab::Result<_>>()?;
            print!("{}", cmd_rate_table(n, q, &ladder)?);
            Ok(0)
        }
    }
}
