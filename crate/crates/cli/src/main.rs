// SPDX-License-Identifier: Apache-2.0

//! `fasco-sim`: run scenarios, the lifecycle benchmark and the property
//! suite from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fasco_core::harness::lifecycle::run_lifecycle;
use fasco_core::harness::run::dump_rtt;
use fasco_core::harness::scenario::{self, Scenario};
use fasco_core::harness::suite::{expected_failures, run_suite, Scale, SuiteConfig};
use fasco_core::harness::{run_scenario, RunOptions};
use fasco_core::rmm::{Mutation, Mutations};

/// Environment variable that overrides every seed.
const SEED_ENV: &str = "FASCO_SEED";

#[derive(Parser)]
#[command(
    name = "fasco-sim",
    version,
    about = "Confidential container runtime simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (built-in name or JSON file) and audit it.
    Run {
        scenario: String,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Disable a maintenance site or protection (repeatable).
        #[arg(long = "mutate")]
        mutate: Vec<String>,
        /// Print per-container metrics as JSON after the summary.
        #[arg(long)]
        metrics: bool,
    },
    /// Create, start, pause, unpause, kill and remove N containers.
    Lifecycle {
        #[arg(long)]
        containers: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run every property check and print a pass/fail matrix.
    Suite {
        /// Disable one maintenance site or protection.
        #[arg(long)]
        mutate: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Smaller problem sizes.
        #[arg(long)]
        quick: bool,
    },
    /// Print a realm's translation tree after setup.
    DumpRtt {
        realm: u32,
        #[arg(long, default_value = "echo")]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List built-in scenarios and mutation names.
    List,
    /// Print a scenario as JSON.
    Show { scenario: String },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| {
            format!("{SEED_ENV}={v} is not an unsigned integer")
        })?)),
        Err(_) => Ok(None),
    }
}

fn load_scenario(name: &str) -> Result<Scenario> {
    let path = Path::new(name);
    if path.is_file() {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(Scenario::from_json(&text)?);
    }
    scenario::builtin(name).with_context(|| format!("no scenario file or built-in named `{name}`"))
}

fn parse_mutation(name: &str) -> Result<Mutation> {
    name.parse::<Mutation>().map_err(anyhow::Error::msg)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let env = env_seed()?;
    match cli.command {
        Command::Run {
            scenario,
            trace,
            seed,
            mutate,
            metrics,
        } => {
            let sc = load_scenario(&scenario)?;
            let mutations: Mutations = mutate
                .iter()
                .map(|m| parse_mutation(m))
                .collect::<Result<_>>()?;
            let opts = RunOptions {
                seed: env.or(seed),
                mutations,
                ..Default::default()
            };
            let report = run_scenario(&sc, &opts)?;
            match trace {
                Some(path) => {
                    fs::write(&path, report.trace_text())
                        .with_context(|| format!("writing {}", path.display()))?;
                    print!("{}", report.summary());
                }
                None => {
                    print!("{}", report.trace_text());
                    eprint!("{}", report.summary());
                }
            }
            if metrics {
                eprintln!("{}", report.metrics.to_json());
            }
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Lifecycle { containers, seed } => {
            let report = run_lifecycle(containers, env.unwrap_or(seed), &Mutations::none())?;
            print!("{}", report.render());
            Ok(if report.findings.is_empty() && report.uniform() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Suite {
            mutate,
            seed,
            quick,
        } => {
            let mutation = mutate.as_deref().map(parse_mutation).transpose()?;
            let config = SuiteConfig {
                seed: env.unwrap_or(seed),
                mutation,
                scale: if quick { Scale::QUICK } else { Scale::FULL },
            };
            let report = run_suite(&config)?;
            print!("{}", report.render());
            let expected: Vec<String> = expected_failures(mutation)
                .into_iter()
                .map(String::from)
                .collect();
            let failing: Vec<String> = report.failing().into_iter().collect();
            let ok = failing == expected;
            println!(
                "expected failing: {expected:?}; observed: {failing:?}; {}",
                if ok { "as expected" } else { "UNEXPECTED" }
            );
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::DumpRtt {
            realm,
            scenario,
            seed,
        } => {
            let sc = load_scenario(&scenario)?;
            let seed = env.or(seed).unwrap_or(sc.seed);
            print!("{}", dump_rtt(&sc, seed, realm)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Show { scenario } => {
            println!("{}", load_scenario(&scenario)?.to_json());
            Ok(ExitCode::SUCCESS)
        }
        Command::List => {
            for sc in scenario::corpus() {
                println!("scenario {}", sc.name);
            }
            println!("scenario getpid-<k>");
            for m in Mutation::all() {
                println!("mutation {m}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_and_mutations_resolve() {
        assert!(load_scenario("echo").is_ok());
        assert!(load_scenario("getpid-10").is_ok());
        assert!(load_scenario("nope").is_err());
        assert!(parse_mutation("skip-wipe").is_ok());
        assert!(parse_mutation("skip-everything").is_err());
    }

    #[test]
    fn cli_parses() {
        Cli::try_parse_from(["fasco-sim", "suite", "--mutate", "skip-seal", "--quick"]).unwrap();
        Cli::try_parse_from(["fasco-sim", "lifecycle", "--containers", "4"]).unwrap();
        assert!(Cli::try_parse_from(["fasco-sim", "lifecycle"]).is_err());
    }
}
