//! `bihyper`: run hypergradient searches and sweeps, and check the theory
//! against exact oracles.
//!
//! Exit status is 0 on success, 1 when a run or check fails and 2 for usage
//! or config errors.

mod config;
mod error;
mod runner;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bihyper::verify::{run_default, CheckName, CheckReport, DEFAULT_SEED};
use clap::{Parser, Subcommand};

use crate::config::{parse_config, Format, RunConfig};
use crate::error::{CliError, ConfigIssue};

/// Output directory used when neither `--out` nor the config names one.
const DEFAULT_OUT: &str = "bihyper-out";
const OUT_ENV: &str = "BIHYPER_OUT";
const VERIFY_FILE: &str = "verify.json";

#[derive(Debug, Parser)]
#[command(name = "bihyper", version, about = "Hypergradient estimators for bilevel problems")]
struct Cli {
    /// Output directory [default: $BIHYPER_OUT, then ./bihyper-out]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Concurrent runs (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Output format: csv, json or both
    #[arg(long, global = true, value_parser = |s: &str| s.parse::<Format>())]
    format: Option<Format>,

    /// Seed overriding the config (and any seed sweep)
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every point of a config, sweep axes included
    Bench { config: PathBuf },
    /// Run a single search; sweep keys are rejected
    Search { config: PathBuf },
    /// Run a sweep; the config needs at least one sweep.* key
    Sweep { config: PathBuf },
    /// Run theory checks by name, or `all`
    Verify {
        #[arg(required = true, value_name = "CHECK")]
        checks: Vec<String>,
    },
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Bench,
    Search,
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode, CliError> {
    match &cli.command {
        Command::Bench { config } => run_config(cli, config, Mode::Bench),
        Command::Search { config } => run_config(cli, config, Mode::Search),
        Command::Sweep { config } => run_config(cli, config, Mode::Sweep),
        Command::Verify { checks } => verify(cli, checks),
    }
}

fn out_dir(cli: &Cli, config: Option<&RunConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.and_then(|c| c.output.clone()))
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

fn run_config(cli: &Cli, path: &Path, mode: Mode) -> Result<ExitCode, CliError> {
    let mut config = load(path)?;
    match mode {
        Mode::Search if !config.sweep.is_empty() => {
            let message = "sweep.* keys need the bench or sweep subcommand";
            return Err(CliError::Config(vec![ConfigIssue::at(0, message)]));
        }
        Mode::Sweep if config.sweep.is_empty() => {
            let message = "the sweep subcommand needs at least one sweep.* key";
            return Err(CliError::Config(vec![ConfigIssue::at(0, message)]));
        }
        _ => {}
    }
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    if let Some(format) = cli.format {
        config.format = format;
    }
    let out = out_dir(cli, Some(&config));
    let report = runner::run_bench(&config, &out, cli.jobs)?;

    let total = report.outcomes.len();
    println!("{} run(s) on {}, {} failed", total, report.problem, report.failed());
    if mode == Mode::Search {
        if let Some(o) = report.outcomes.first() {
            let t = &o.trajectory;
            println!("final alpha: {:?}", t.final_alpha().as_slice());
            if let Some(arch) = &t.architecture {
                println!("architecture: {arch:?}");
            }
            match t.converged_at {
                Some(r) => println!("converged at round {r}"),
                None => println!("not converged"),
            }
        }
    } else {
        for line in runner::summary_table(&config, &report.outcomes) {
            println!("{line}");
        }
    }
    for o in report.outcomes.iter().filter_map(|o| o.error.as_ref()) {
        eprintln!("{} failed during {}: {}", o.run_id, o.stage, o.message);
    }
    for path in &report.written {
        println!("wrote {}", path.display());
    }
    Ok(if report.failed() > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn selected_checks(names: &[String]) -> Result<Vec<CheckName>, CliError> {
    let mut out = Vec::new();
    for name in names {
        let add: Vec<CheckName> = if name == "all" {
            CheckName::ALL.to_vec()
        } else {
            vec![name.parse::<CheckName>().map_err(|e| CliError::Usage(e.to_string()))?]
        };
        for c in add {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    Ok(out)
}

fn headline(report: &CheckReport) -> String {
    report
        .measured
        .iter()
        .map(|(label, value)| format!("{label}={value:.3e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn verify(cli: &Cli, names: &[String]) -> Result<ExitCode, CliError> {
    let checks = selected_checks(names)?;
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let mut reports = Vec::new();
    for check in checks {
        for report in run_default(check, seed)? {
            let status = if report.passed { "PASS" } else { "FAIL" };
            println!("{:<26} {status} {}", report.check_name, headline(&report));
            for note in &report.notes {
                println!("  note: {note}");
            }
            for row in report.failing_rows() {
                println!("  failed: {} ({} vs {})", row.case, row.lhs, row.rhs);
            }
            reports.push(report);
        }
    }
    let out = out_dir(cli, None);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let path = out.join(VERIFY_FILE);
    let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &reports)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} reports passed; wrote {}", reports.len() - failed, reports.len(), path.display());
    Ok(if failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn all_expands_without_duplicates() {
        let names = vec!["descent".to_string(), "all".to_string()];
        let checks = selected_checks(&names).unwrap();
        assert_eq!(checks.len(), CheckName::ALL.len());
        assert_eq!(checks[0], CheckName::Descent);
    }

    #[test]
    fn unknown_check_is_usage_error() {
        let err = selected_checks(&["nosuch".to_string()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("theorem1"));
    }
}
