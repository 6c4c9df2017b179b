//! `mflq`: solve, simulate and check mean-field linear-quadratic social
//! control problems from a JSON configuration.

mod commands;
mod error;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mflq::model::validate;

use crate::commands::{execute, load_spec, Request};
use crate::error::{CliError, EXIT_ASSUMPTION, EXIT_OK, EXIT_OTHER};
use crate::output::RunManifest;

/// Environment variable capping the number of worker threads.
const THREADS_VAR: &str = "MFLQ_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mflq", version, about = "Mean-field LQ social control: solve, simulate, and check against oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Model configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Preferred Riccati solver: direct, fundamental or exponential.
    #[arg(long = "riccati-method")]
    riccati_method: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a configuration against the model assumptions.
    Validate {
        /// Model configuration (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve the consistency system and report decoupling diagnostics.
    SolveMf {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the decentralized strategy on a finite population.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Population size; agents follow the limiting type proportions.
        #[arg(long = "N")]
        agents: Option<usize>,
        /// Number of Monte Carlo paths.
        #[arg(long, default_value_t = 2000)]
        paths: usize,
        /// Run seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the trajectory of one agent on one path, both one-based.
        #[arg(long, value_name = "AGENT,PATH", value_parser = parse_pair)]
        record: Option<(usize, usize)>,
    },
    /// Rate study of the mean-field error and the optimality gap over N.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Comma-separated population sizes.
        #[arg(long = "N-list", value_delimiter = ',', required = true)]
        agents: Vec<usize>,
        /// Number of Monte Carlo paths per size.
        #[arg(long, default_value_t = 2000)]
        paths: usize,
        /// Run seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Accept sizes whose type proportions differ from the limit.
        #[arg(long = "allow-epsN")]
        allow_eps_n: bool,
    },
    /// Compare the strategy against the exact scenario-tree optimum.
    OracleCompare {
        #[command(flatten)]
        common: Common,
        /// Grid cells of the tree, overriding the configuration.
        #[arg(long = "tree-steps")]
        tree_steps: Option<usize>,
        /// Population size, overriding the configuration.
        #[arg(long = "N")]
        agents: Option<usize>,
        /// Number of Monte Carlo paths.
        #[arg(long, default_value_t = 4000)]
        paths: usize,
        /// Run seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Re-run a command from its manifest.
    Replay {
        /// Manifest written by an earlier run.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected AGENT,PATH, got {s:?}"))?;
    let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((num(a)?, num(b)?))
}

fn read_config(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot build the thread pool: {e}")))
}

fn run_request(common: Common, request: impl FnOnce(Option<String>) -> Request) -> Result<u8, CliError> {
    let config = read_config(&common.config)?;
    let request = request(common.riccati_method);
    let (_, summary) = execute(&config, &common.config.display().to_string(), &request, &common.out)?;
    println!("{summary}");
    println!("outputs written to {}", common.out.display());
    Ok(EXIT_OK)
}

fn run(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Validate { config } => {
            let spec = load_spec(&read_config(&config)?)?;
            let report = validate(&spec);
            println!("{report}");
            Ok(if report.passed() { EXIT_OK } else { EXIT_ASSUMPTION })
        }
        Command::SolveMf { common } => run_request(common, |riccati_method| Request::SolveMf { riccati_method }),
        Command::Simulate { common, agents, paths, seed, record } => {
            run_request(common, |riccati_method| Request::Simulate { agents, paths, seed, record, riccati_method })
        }
        Command::Converge { common, agents, paths, seed, allow_eps_n } => run_request(common, |riccati_method| {
            Request::Converge { agents, paths, seed, allow_eps_n, riccati_method }
        }),
        Command::OracleCompare { common, tree_steps, agents, paths, seed } => run_request(common, |riccati_method| {
            Request::OracleCompare { agents, tree_steps, paths, seed, riccati_method }
        }),
        Command::Replay { manifest, out } => {
            let recorded = RunManifest::load(&manifest)?;
            let out = out.unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
            let (_, summary) = execute(&recorded.config, &recorded.config_path, &recorded.request, &out)?;
            println!("{summary}");
            println!("outputs written to {}", out.display());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_OTHER } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = configure_threads().and_then(|()| run(cli.command));
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn record_pair_parses() {
        assert_eq!(parse_pair("3,7").unwrap(), (3, 7));
        assert!(parse_pair("3").is_err());
        assert!(parse_pair("a,1").is_err());
    }

    #[test]
    fn sweep_flag_splits_on_commas() {
        let cli = Cli::try_parse_from(["mflq", "converge", "--config", "c.json", "--out", "o", "--N-list", "10,20,40"]).unwrap();
        match cli.command {
            Command::Converge { agents, paths, .. } => {
                assert_eq!(agents, vec![10, 20, 40]);
                assert_eq!(paths, 2000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
