use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedprompt::config::{ExperimentConfig, SweepTag, Target};
use fedprompt::experiment::run_experiment;
use fedprompt::gradcheck::run_gradcheck;
use fedprompt::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "fedprompt", version, about = "Federated prompt-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the configured target (or every target).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Leave-one-domain-out over every domain, with a summary table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Finite-difference check of every objective gradient.
    Gradcheck {
        #[arg(long, default_value_t = 24)]
        configs: usize,
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn experiment(config: &Path, out: &Path, force_sweep: bool) -> ExitCode {
    let mut cfg = match ExperimentConfig::load(config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if force_sweep {
        cfg.target = Target::Sweep(SweepTag::Sweep);
    }
    match run_experiment(&cfg, Some(out)) {
        Ok(summary) => {
            print!("{}", summary.table());
            println!("results written to {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config, out } => experiment(&config, &out, false),
        Command::Sweep { config, out } => experiment(&config, &out, true),
        Command::Gradcheck { configs, perturb } => {
            let start = std::time::Instant::now();
            let report = match run_gradcheck(configs, perturb) {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            for f in &report.families {
                println!(
                    "{:<10} configs={:<3} max_rel_err={:.3e} {}",
                    f.family,
                    f.configs,
                    f.max_rel_err,
                    if f.passed { "ok" } else { "FAIL" }
                );
            }
            println!(
                "tolerance {:.0e}, step {:.0e}, {:.2}s",
                report.tolerance,
                report.step,
                start.elapsed().as_secs_f64()
            );
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY)
            }
        }
    }
}
