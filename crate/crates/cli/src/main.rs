use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driftlab::config::parse_config;
use driftlab::error::CliError;
use driftlab::manifest::verify;
use driftlab::runner::{run_experiment, with_thread_pool};
use driftlab_core::evaluation::{read_scores_csv, write_eer_table_csv, EerRow};
use driftlab_core::neuralnet::gradcheck::{run_suite, TOLERANCE};

#[derive(Parser)]
#[command(
    name = "driftlab",
    version,
    about = "Pool-based speaker anonymization, vocoder drift and drift-reversal attacks in embedding space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV reports.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and validate a config, printing the resolved form.
    Validate { config: PathBuf },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Compute the EER of a score file (`enroll_spk,utt,is_target,score`).
    Eer { scores: PathBuf },
    /// Recheck the digests in an output directory's manifest.
    Verify {
        dir: PathBuf,
        /// Also rerun the resolved config and compare the CSVs.
        #[arg(long)]
        rerun: bool,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = parse_config(&config)?.with_overrides(seed, out);
            cfg.validate()?;
            let summary = run_experiment(&cfg)?;
            for ch in &summary.channels {
                println!("channel {}", ch.name);
                for row in ch.eer_rows()? {
                    println!(
                        "  {:<16} EER {:>7.3}%",
                        row.evaluation,
                        100.0 * row.result.eer
                    );
                }
            }
            println!(
                "wrote {} files to {}",
                summary.manifest.files.len() + 1,
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = parse_config(&config)?;
            print!("{}", cfg.to_json());
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            let report = with_thread_pool(|| run_suite(seeds))?
                .map_err(|e| CliError::Runtime(format!("gradcheck: {e}")))?;
            for check in report.checks() {
                let worst = report.worst(check).unwrap_or(0.0);
                let verdict = if worst < TOLERANCE { "ok" } else { "FAIL" };
                println!(
                    "{check:<14} max relative error {worst:.3e} over {seeds} seeds  {verdict}"
                );
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!(
                    "gradient check exceeded tolerance {TOLERANCE:e}"
                )))
            }
        }
        Command::Eer { scores } => {
            let file = File::open(&scores)
                .map_err(|e| CliError::io(format!("opening {}", scores.display()), e))?;
            let runtime = |e: driftlab_core::error::Error| {
                CliError::Runtime(format!("{}: {e}", scores.display()))
            };
            let result = read_scores_csv(file)
                .map_err(runtime)?
                .eer()
                .map_err(runtime)?;
            let row = EerRow {
                evaluation: scores.display().to_string(),
                result,
            };
            write_eer_table_csv(&[row], std::io::stdout().lock()).map_err(runtime)
        }
        Command::Verify { dir, rerun } => {
            let report = verify(&dir, rerun)?;
            for m in &report.mismatches {
                println!("MISMATCH {m}");
            }
            if report.ok() {
                println!("verified {} entries", report.checked);
                Ok(())
            } else {
                Err(CliError::Runtime(format!(
                    "{} mismatches",
                    report.mismatches.len()
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
