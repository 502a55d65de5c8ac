use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use svmlab::cli::{output_root, run_experiment, sweep, ExperimentConfig, RunManifest, SweepStatus, MANIFEST_FILE};
use svmlab::Error;

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "svmlab", version, about = "Stochastic-variational field and hybrid dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its outputs and manifest.
    Run { config: PathBuf },
    /// Run the experiment once per value of a scalar config field.
    Sweep {
        config: PathBuf,
        /// Dotted field path (`physical.charge`) or alias (`e`, `T`, `dt`, `seed`).
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

fn exit_for(err: Error, context: &str) -> ExitCode {
    let code = if matches!(err, Error::Config(_)) { EXIT_CONFIG } else { EXIT_RUNTIME };
    eprintln!("error: {:#}", anyhow::Error::new(err).context(context.to_string()));
    ExitCode::from(code)
}

fn report(m: &RunManifest) {
    for c in &m.criteria {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {:e} {} {:e}", c.name, c.value, c.relation, c.threshold);
    }
}

fn read(path: &PathBuf) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                println!("{} config is valid ({})", cfg.experiment.name(), config.display());
                ExitCode::SUCCESS
            }
            Err(e) => exit_for(e, "validating config"),
        },
        Command::Run { config } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(cfg) => cfg,
                Err(e) => return exit_for(e, "loading config"),
            };
            let root = output_root();
            match run_experiment(&cfg, &root) {
                Ok(m) => {
                    report(&m);
                    println!("manifest: {}", root.join(&cfg.output.directory).join(MANIFEST_FILE).display());
                    if m.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_FAIL)
                    }
                }
                Err(e) => exit_for(e, &format!("running {}", cfg.experiment.name())),
            }
        }
        Command::Sweep { config, axis, values } => {
            let text = match read(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let rows = match sweep(&text, &axis, &values, &output_root()) {
                Ok(rows) => rows,
                Err(e) => return exit_for(e, "running sweep"),
            };
            for r in &rows {
                match (&r.status, &r.error) {
                    (_, Some(err)) => println!("ERROR {axis}={}: {err}", r.value),
                    (SweepStatus::Pass, _) => println!("PASS {axis}={}", r.value),
                    _ => println!("FAIL {axis}={}", r.value),
                }
            }
            if rows.iter().any(|r| r.status == SweepStatus::Error) {
                ExitCode::from(EXIT_RUNTIME)
            } else if rows.iter().any(|r| r.status == SweepStatus::Fail) {
                ExitCode::from(EXIT_FAIL)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
