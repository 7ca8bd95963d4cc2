//! Command-line front end: grid scans, replicated estimates, influence
//! curves, covariance studies, and named presets, all driven by JSON configs
//! and writing deterministic CSV/JSON outputs.
//!
//! Exit codes: 0 on success, 1 for configuration problems (unknown ids, bad
//! parameters, unreadable files), 2 for numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stein_estim::harness::{
    clt_study, configure_threads_from_env, influence_study, list_presets, run_experiment,
    run_preset, run_summary_value, scan_study, write_clt_csv, write_influence_csv,
    write_reps_csv, write_scan_csv, write_summary_json, ExperimentConfig, ESTIMATOR_KINDS,
};
use stein_estim::kernel::list_kernels;
use stein_estim::model::list_models;
use stein_estim::{diffusion::list_diffusions, Error};

#[derive(Parser)]
#[command(
    name = "stein-estim",
    about = "minimum-discrepancy estimation for unnormalized models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the replicated estimate described by a JSON config; writes
    /// reps.csv and summary.json.
    Estimate {
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the configured loss on the configured grid; writes scan.csv.
    Scan {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit once, then trace the influence function over the config's z-grid;
    /// writes influence.csv.
    Influence {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replication-vs-plug-in covariance study over the config's sample
    /// sizes; writes clt.csv.
    Clt {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a named preset experiment into a directory.
    Preset {
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the preset's replication count (smoke runs).
        #[arg(long)]
        replications: Option<usize>,
    },
    /// List builtin models, kernels, diffusions, estimator kinds, presets.
    List,
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_json_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Estimate { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let result = run_experiment(&cfg)?;
            let dim = result.median.len();
            write_reps_csv(&out.join("reps.csv"), dim, &result.records)?;
            write_summary_json(&out.join("summary.json"), &run_summary_value(&cfg, &result))?;
            println!(
                "{} replications, {} failed; median = {:?}",
                result.records.len(),
                result.failures,
                result.median.to_vec()
            );
        }
        Command::Scan { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let (rows, best) = scan_study(&cfg)?;
            write_scan_csv(&out.join("scan.csv"), cfg.theta_star.len(), &rows)?;
            match best {
                Some(i) => println!(
                    "{} grid points; argmin at {:?} with loss {}",
                    rows.len(),
                    rows[i].theta.to_vec(),
                    rows[i].loss.expect("argmin row has a loss")
                ),
                None => println!("{} grid points; every point failed", rows.len()),
            }
        }
        Command::Influence { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let grid = cfg.influence_grid.clone().ok_or_else(|| {
                Error::config("the influence subcommand needs an influence_grid block")
            })?;
            let (rows, theta_hat) = influence_study(&cfg, &grid)?;
            write_influence_csv(&out.join("influence.csv"), theta_hat.len(), &rows)?;
            println!(
                "{} grid points at estimate {:?}",
                rows.len(),
                theta_hat.to_vec()
            );
        }
        Command::Clt { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let sizes = cfg.clt_sizes.clone().ok_or_else(|| {
                Error::config("the clt subcommand needs a clt_sizes list in the config")
            })?;
            let study = clt_study(&cfg, &sizes)?;
            write_clt_csv(&out.join("clt.csv"), &study.rows)?;
            println!("{} covariance entries across {} sizes", study.rows.len(), sizes.len());
        }
        Command::Preset {
            name,
            out,
            seed,
            replications,
        } => {
            let outcome = run_preset(&name, &out, seed, replications)?;
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
        }
        Command::List => {
            println!("models (id | hypers | density):");
            for (id, h, desc) in list_models() {
                println!("  {id:<20} {h:<8} {desc}");
            }
            println!("kernels (id | params | form):");
            for (id, p, desc) in list_kernels() {
                println!("  {id:<20} {p:<8} {desc}");
            }
            println!("diffusions (id | hypers | form):");
            for (id, h, desc) in list_diffusions() {
                println!("  {id:<20} {h:<8} {desc}");
            }
            println!("estimators: {}", ESTIMATOR_KINDS.join(", "));
            println!("presets:");
            for (id, desc) in list_presets() {
                println!("  {id:<20} {desc}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Err(e) = configure_threads_from_env() {
        eprintln!("{e}");
        return ExitCode::from(1);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                Error::Numeric(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
