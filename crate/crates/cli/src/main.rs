use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use owb_cli::{Cell, CliError, CliResult, ExperimentConfig, Run};
use owb_core::metrics::ReportFormat;

#[derive(Parser)]
#[command(name = "owb", version, about = "Open-world ML benchmark: train, calibrate, evaluate, attack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier and the networks the detectors need.
    Train(Common),
    /// Fit every detector and calibrate its threshold.
    Calibrate(Common),
    /// FPR of every detector on every OOD family, clean or corrupted.
    Evaluate(Common),
    /// Attack campaigns against every detector.
    Attack(Common),
    /// All stages in order; attacks only when the condition asks for them.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output root; overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one DETECTOR:DATASET cell.
    #[arg(long)]
    cell: Option<String>,
    /// Report format; overrides `format`.
    #[arg(long)]
    format: Option<String>,
}

fn setup(c: &Common) -> CliResult<Run> {
    let text = ExperimentConfig::read(&c.config)?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(out) = &c.out {
        config.out = out.clone();
    }
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    if let Some(f) = &c.format {
        config.format = f
            .parse::<ReportFormat>()
            .map_err(|_| owb_cli::ConfigError { line: None, message: format!("unknown --format `{f}`; use csv or json") })?;
    }
    let exp = config.resolve(&text)?;
    let cell = c.cell.as_deref().map(str::parse::<Cell>).transpose()?;
    Run::new(exp, cell)
}

fn execute(cmd: Command) -> CliResult<()> {
    let report = |p: PathBuf| println!("{}", p.display());
    match cmd {
        Command::Train(c) => {
            let run = setup(&c)?;
            run.train()?;
            println!("{}", run.dir.display());
        }
        Command::Calibrate(c) => {
            let run = setup(&c)?;
            run.calibrate()?;
            report(run.path("calibration.csv"));
        }
        Command::Evaluate(c) => report(setup(&c)?.evaluate()?),
        Command::Attack(c) => report(setup(&c)?.attack()?),
        Command::Run(c) => setup(&c)?.all()?.into_iter().for_each(report),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if let CliError::Config(_) = e {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
