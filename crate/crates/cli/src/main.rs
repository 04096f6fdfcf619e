use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ggn_cli::experiment::{
    certify, compare_algorithms, run_experiment, run_failure_sweep, write_key_values,
};
use ggn_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "ggn",
    version,
    about = "Gossip-based Gauss-Newton state estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write per-repetition and averaged CSVs.
    Run { config: PathBuf },
    /// Repeat a URE run for each link-failure probability.
    SweepFailures {
        config: PathBuf,
        /// Failure probabilities, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
    },
    /// Run two configs on the same instance and align them by gossip exchanges.
    Compare {
        config_a: PathBuf,
        config_b: PathBuf,
    },
    /// Estimate problem constants and print the convergence certificate.
    Certify { config: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = run_experiment(&cfg)?;
            for (k, v) in &s.summary {
                println!("{k} = {v}");
            }
        }
        Command::SweepFailures { config, p } => {
            let cfg = ExperimentConfig::load(&config)?;
            for r in run_failure_sweep(&cfg, &p)? {
                println!(
                    "p = {}: val = {:.6e}, mse_v = {:.6e}, disagreement = {:.4e}, converged = {}",
                    r.p, r.final_val, r.final_mse_v_mean, r.final_disagreement, r.converged
                );
            }
        }
        Command::Compare { config_a, config_b } => {
            let a = ExperimentConfig::load(&config_a)?;
            let b = ExperimentConfig::load(&config_b)?;
            let c = compare_algorithms(&a, &b)?;
            println!("common_budget = {}", c.common_budget);
            for s in c.a.iter().chain(&c.b) {
                if let Some((x, v, g)) = s.at(c.common_budget) {
                    println!(
                        "{}: exchanges = {x}, val = {v:.6e}, grad = {g:.6e}",
                        s.label
                    );
                }
            }
        }
        Command::Certify { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let cert = certify(&cfg)?;
            let kv = cert.to_key_values();
            for (k, v) in &kv {
                println!("{k} = {v}");
            }
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Io {
                path: cfg.output_dir.clone(),
                source: e,
            })?;
            write_key_values(&Path::new(&cfg.output_dir).join("certificate.txt"), &kv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
