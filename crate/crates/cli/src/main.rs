use clap::{Parser, Subcommand};
use maryland_cli::artifacts::write_json;
use maryland_cli::config::ExperimentConfig;
use maryland_cli::pipeline::{self, PipelineError};
use maryland_cli::{exit_codes, ConfigError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Numerical experiments on the nonlinear Maryland model: localized
/// spectra, separation predicates, quasi-periodic solutions, and
/// Green's-function probes.
#[derive(Parser)]
#[command(name = "maryland", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for internal sweeps; never affects artifact bytes.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Diagonalize the operator, check symmetries, profile E(theta).
    Spectrum,
    /// Run the separation, Melnikov, and transversality predicates.
    Separation,
    /// Solve for a quasi-periodic solution by Newton iteration.
    Solve,
    /// Probe the Green's-function bounds of the linearized operator.
    Ldt,
    /// Consolidate a run directory into markdown + CSV.
    Report,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Spectrum => "spectrum",
        Command::Separation => "separation",
        Command::Solve => "solve",
        Command::Ldt => "ldt",
        Command::Report => "report",
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let path = cli.config.as_ref().ok_or_else(|| {
        PipelineError::Config(ConfigError::InvalidValue(
            "--config PATH is required for this command".into(),
        ))
    })?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = cli.seed {
        cfg.probes.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, PipelineError> {
    if let Some(out) = &cli.out {
        return Ok(out.clone());
    }
    match cfg {
        Some(c) => Ok(PathBuf::from(&c.output.directory)),
        None => Err(PipelineError::Config(ConfigError::InvalidValue(
            "--out DIR (or --config with an [output] section) is required".into(),
        ))),
    }
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, (PipelineError, Option<PathBuf>)> {
    match &cli.command {
        Command::Report => {
            let cfg = match &cli.config {
                Some(_) => Some(load_config(cli).map_err(|e| (e, None))?),
                None => None,
            };
            let dir = out_dir(cli, cfg.as_ref()).map_err(|e| (e, None))?;
            pipeline::run_report(&dir).map_err(|e| (e, Some(dir)))
        }
        other => {
            let cfg = load_config(cli).map_err(|e| (e, None))?;
            let dir = out_dir(cli, Some(&cfg)).map_err(|e| (e, None))?;
            let result = match other {
                Command::Spectrum => pipeline::run_spectrum(&cfg, &dir),
                Command::Separation => pipeline::run_separation(&cfg, &dir),
                Command::Solve => pipeline::run_solve(&cfg, &dir),
                Command::Ldt => pipeline::run_ldt(&cfg, &dir, cli.threads.max(1)),
                Command::Report => unreachable!(),
            };
            result.map_err(|e| (e, Some(dir)))
        }
    }
}

fn write_failure(dir: &Path, command: &str, err: &PipelineError) {
    // Best effort; the exit code is the contract.
    let _ = write_json(dir, "failure.json", &err.failure_json(command));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    match run(&cli) {
        Ok(written) => {
            for path in written {
                println!("wrote {}", path.display());
            }
            ExitCode::from(exit_codes::SUCCESS as u8)
        }
        Err((err, dir)) => {
            eprintln!("{name}: error[{}]: {err}", err.code());
            if let Some(dir) = dir {
                write_failure(&dir, name, &err);
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
