use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pkirch_core::acceptance::{self, Settings};
use pkirch_core::experiment::{self, ExitStatus};
use pkirch_core::Error;

/// Experiment runner for the nonlocal p-Kirchhoff toolkit.
///
/// Relative output directories resolve against $PKIRCH_OUTPUT_ROOT when set.
#[derive(Parser)]
#[command(name = "pkirch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run { config: PathBuf },
    /// Run every cell of a config's [sweep] section.
    Sweep { config: PathBuf },
    /// Run the acceptance suite and print PASS/FAIL per criterion.
    Verify {
        /// Only run this criterion (1-10 or c1-c10).
        #[arg(long)]
        only: Option<String>,
        /// Inner solver tolerance.
        #[arg(long, allow_negative_numbers = true)]
        tol: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for experiment outputs (defaults to a temp directory).
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Print the exponent table for key=value parameters (p, N, alpha, s, R, n_max).
    Exponents { params: Vec<String> },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    code(ExitStatus::for_error(e))
}

fn code(s: ExitStatus) -> ExitCode {
    ExitCode::from(s.code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => match experiment::run_path(&config) {
            Ok(out) => {
                println!("{} -> {}", experiment::kind_name(out.kind), out.dir.display());
                for (k, v) in &out.headline {
                    println!("  {k} = {v}");
                }
                println!("{}", if out.passed { "status: pass" } else { "status: fail" });
                code(out.status())
            }
            Err(e) => fail(&e),
        },
        Command::Sweep { config } => match experiment::sweep_path(&config) {
            Ok(cells) => {
                let mut all_ok = true;
                for c in &cells {
                    let params: Vec<String> = c.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    match &c.outcome {
                        Ok(o) => {
                            all_ok &= o.passed;
                            println!(
                                "cell {:03} [{}] {}",
                                c.index,
                                params.join(" "),
                                if o.passed { "pass" } else { "fail" }
                            );
                        }
                        Err(e) => {
                            all_ok = false;
                            println!("cell {:03} [{}] error: {e}", c.index, params.join(" "));
                        }
                    }
                }
                code(if all_ok {
                    ExitStatus::Ok
                } else {
                    ExitStatus::CheckFailed
                })
            }
            Err(e) => fail(&e),
        },
        Command::Verify {
            only,
            tol,
            seed,
            work_dir,
        } => {
            let mut settings = Settings::default();
            if let Some(t) = tol {
                settings.tol = t;
            }
            if let Some(s) = seed {
                settings.seed = s;
            }
            if let Some(d) = work_dir {
                settings.work_dir = d;
            }
            if let Err(e) = settings.validate() {
                return fail(&e);
            }
            let ids: Vec<u8> = match only.as_deref().map(acceptance::parse_criterion) {
                Some(Ok(id)) => vec![id],
                Some(Err(e)) => return fail(&e),
                None => acceptance::CRITERIA.iter().map(|(id, _)| *id).collect(),
            };
            let mut all_ok = true;
            for id in ids {
                match acceptance::run_criterion(id, &settings) {
                    Ok(report) => {
                        all_ok &= report.passed();
                        println!("{report}");
                    }
                    Err(e) => {
                        all_ok = false;
                        println!("FAIL C{id} error: {e}");
                    }
                }
            }
            code(if all_ok {
                ExitStatus::Ok
            } else {
                ExitStatus::CheckFailed
            })
        }
        Command::Exponents { params } => {
            let table = experiment::parse_exponent_args(&params).and_then(|ec| experiment::exponent_table(&ec));
            match table {
                Ok(rows) => {
                    println!("quantity,value");
                    for (k, v) in rows {
                        println!("{k},{v}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
