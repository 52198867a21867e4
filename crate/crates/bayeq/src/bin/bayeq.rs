//! Command-line front end: BER/FER sweeps, calibration scatter runs, and
//! the self-check against the brute-force oracles.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use bayeq::harness::{
    run_calibration, run_experiment, write_calibration_csv, write_result_csv, write_result_json,
    CalibrationConfig, ExperimentConfig,
};
use bayeq::oracles::run_oracle_check;

#[derive(Parser)]
#[command(
    name = "bayeq",
    about = "BER simulation comparing an ML-estimate BCJR receiver with a \
             Bayesian receiver that marginalizes channel uncertainty",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a BER-vs-SNR sweep; writes result.csv and result.json.
    Simulate {
        /// Flat `key = value` experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Directory for result.csv / result.json.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Collect calibration scatter data; writes calibration.csv.
    Calibrate {
        /// Flat `key = value` calibration config file.
        #[arg(long)]
        config: PathBuf,
        /// Directory for calibration.csv.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Cross-check the fast implementations against brute-force oracles;
    /// exits nonzero if any case deviates beyond tolerance.
    OracleCheck {
        /// Seed for the randomized oracle instances.
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Simulate { config, out_dir } => {
            let cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("reading experiment config {}", config.display()))?;
            let result = run_experiment(&cfg)?;
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let csv = out_dir.join("result.csv");
            let json = out_dir.join("result.json");
            write_result_csv(&result, &csv)?;
            write_result_json(&result, &json)?;
            for p in &result.points {
                println!(
                    "snr {:>6.2} dB  ber_pre {:.3e}  ber_post {:.3e}  fer {:.3e}  frames {}{}",
                    p.snr_db,
                    p.ber_pre,
                    p.ber_post,
                    p.fer,
                    p.frames,
                    if p.skipped_frames > 0 {
                        format!("  (skipped {})", p.skipped_frames)
                    } else {
                        String::new()
                    }
                );
            }
            println!("wrote {} and {}", csv.display(), json.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { config, out_dir } => {
            let cfg = CalibrationConfig::from_file(&config)
                .with_context(|| format!("reading calibration config {}", config.display()))?;
            let record = run_calibration(&cfg)?;
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let csv = out_dir.join("calibration.csv");
            write_calibration_csv(&record, &csv)?;
            println!(
                "{} bits recorded ({} frames skipped): overconfident {:.3}, underconfident {:.3}",
                record.pairs.len(),
                record.skipped_frames,
                record.overconfident_fraction(),
                record.underconfident_fraction()
            );
            println!("wrote {}", csv.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleCheck { seed } => {
            let reports = run_oracle_check(seed);
            for report in &reports {
                println!("{report}");
            }
            if reports.iter().all(|r| r.passed) {
                println!("all oracle checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
