//! `sandbox-measure`: run measurement scenarios, audit their privacy
//! accounting, and inspect budget ledgers.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sandbox_measure::aggregation::PrivacyBudgetLedger;
use sandbox_measure_cli::audit::run_audit_file;
use sandbox_measure_cli::runner::{simulate_file, SimulateOptions};
use sandbox_measure_cli::{CliError, EXIT_ABORTED, EXIT_FAILURE, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "sandbox-measure",
    about = "Attribution and aggregation measurement simulator with privacy auditing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file; writes reports, transcript, and trace next to
    /// it and accumulates spend in its budget ledger.
    ///
    /// Exits 0 on success, 2 if any aggregation turn aborted on budget,
    /// 3 on schema errors, 4 on ledger conflicts.
    Simulate {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Ledger file (default: <scenario-dir>/<stem>.ledger, or
        /// $SANDBOX_MEASURE_LEDGER_DIR/<stem>.ledger).
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Directory for output artifacts (default: the scenario's).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the checks in an audit config; exits 1 if any check fails.
    Audit {
        config: PathBuf,
        /// Also write the audit report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print per-report budget spend from a ledger file.
    BudgetReport { ledger: PathBuf },
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code())
}

fn simulate(scenario: PathBuf, opts: SimulateOptions) -> ExitCode {
    match simulate_file(&scenario, &opts) {
        Ok(outcome) => {
            println!("reports    {}", outcome.reports_path.display());
            println!("transcript {}", outcome.transcript_path.display());
            if let Some(p) = &outcome.trace_path {
                println!("trace      {}", p.display());
            }
            if let Some(p) = &outcome.ledger_path {
                println!("ledger     {}", p.display());
            }
            if outcome.aborted_turns > 0 {
                println!("aborted turns: {}", outcome.aborted_turns);
                ExitCode::from(EXIT_ABORTED)
            } else {
                ExitCode::from(EXIT_OK)
            }
        }
        Err(e) => fail(&e),
    }
}

fn audit(config: PathBuf, report: Option<PathBuf>) -> ExitCode {
    match run_audit_file(&config) {
        Ok(outcome) => {
            print!("{}", outcome.report_text());
            if let Some(path) = report {
                if let Err(e) = std::fs::write(&path, outcome.report_text()) {
                    return fail(&CliError::Io(format!("{}: {e}", path.display())));
                }
            }
            if outcome.passed() {
                ExitCode::from(EXIT_OK)
            } else {
                eprintln!(
                    "error: audit failed at check {:?} ({} of {} checks failed)",
                    outcome.first_failure().unwrap_or("?"),
                    outcome.failed,
                    outcome.lines.len()
                );
                ExitCode::from(EXIT_FAILURE)
            }
        }
        Err(e) => fail(&e),
    }
}

fn budget_report(path: PathBuf) -> ExitCode {
    let ledger = match PrivacyBudgetLedger::load(&path) {
        Ok(l) => l,
        Err(e) => return fail(&CliError::Ledger(format!("{}: {e}", path.display()))),
    };
    println!("ledger {}", path.display());
    println!("caps eps={} delta={}", ledger.eps_cap(), ledger.delta_cap());
    let mut total = (0.0f64, 0.0f64);
    for (id, (eps, delta)) in ledger.iter() {
        let (re, rd) = ledger.remaining(id);
        println!("id={id} spent eps={eps} delta={delta} remaining eps={re} delta={rd}");
        total.0 += eps;
        total.1 += delta;
    }
    println!("reports={} total eps={} delta={}", ledger.len(), total.0, total.1);
    ExitCode::from(EXIT_OK)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Simulate { scenario, seed, ledger, out_dir } => {
            simulate(scenario, SimulateOptions { seed, ledger, out_dir })
        }
        Command::Audit { config, report } => audit(config, report),
        Command::BudgetReport { ledger } => budget_report(ledger),
    }
}
