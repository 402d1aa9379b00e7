use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use pivoflow::pipeline::{run_stages, stages_for};
use pivoflow::{Error, PipelineConfig};
use pivoflow_core::integrate::StepMethod;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Simulate,
    TrainCnf,
    TrainVsde,
    Infer,
    Eval,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Integrator {
    Euler,
    Heun,
    Rk4,
    Dopri5,
}

/// Simulate particle trajectories, train the flow and the controller, and
/// evaluate ensemble predictions.
#[derive(Debug, Parser)]
#[command(name = "pivoflow", version)]
struct Cli {
    command: Command,
    /// Config file, or `preset:poiseuille`, `preset:vortex`, `preset:shear`.
    #[arg(long)]
    config: String,
    /// Overrides trajectory.seed and inference.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides inference.integrator.
    #[arg(long, value_enum)]
    integrator: Option<Integrator>,
    /// Directory that relative artifact paths are resolved against.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn load(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match cli.config.strip_prefix("preset:") {
        Some(name) => PipelineConfig::preset(name)?,
        // An unreadable config file is a configuration problem, not an IO failure.
        None => PipelineConfig::load(Path::new(&cli.config)).map_err(|e| match e {
            Error::MissingFile(_) | Error::Io { .. } => Error::Config(e.to_string()),
            e => e,
        })?,
    };
    if let Some(seed) = cli.seed {
        cfg.trajectory.seed = seed;
        cfg.inference.seed = seed;
    }
    if let Some(i) = cli.integrator {
        cfg.inference.integrator = match i {
            Integrator::Euler => StepMethod::Euler,
            Integrator::Heun => StepMethod::Heun,
            Integrator::Rk4 => StepMethod::Rk4,
            Integrator::Dopri5 => StepMethod::Dopri5,
        };
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command.to_possible_value().expect("no skipped variants").get_name().to_string();
    let stages = stages_for(&command).expect("every command maps to stages");
    let result = load(&cli).and_then(|cfg| {
        run_stages(&stages, &cfg, &cli.out, |log| {
            eprintln!("{}: done in {:.1} s", log.stage.name(), log.wall_time_s);
            for (k, v) in &log.entries {
                eprintln!("  {k}: {v}");
            }
        })
    });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pivoflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
