use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fsegrad::experiment::{self, ExperimentConfig, ExperimentError, RawConfig};

#[derive(Parser)]
#[command(name = "fsegrad", version, about = "Online recurrent gradients by forward sensitivity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write <out>.csv and <out>.json.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Run several methods (or config files) on the same trajectory.
    Compare {
        /// Config file per member; may be repeated.
        #[arg(long)]
        config: Vec<PathBuf>,
        /// Method per member; may be repeated.
        #[arg(long)]
        method: Vec<String>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Measure per-step cost at increasing step counts.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        /// Comma-separated 1-based step counts.
        #[arg(long, default_value = "100,1000")]
        checkpoints: String,
        #[arg(long, default_value_t = 100)]
        window: usize,
        #[command(flatten)]
        flags: Flags,
    },
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    cell: Option<String>,
    /// i,h[,h2],o
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    update_params: bool,
    #[arg(long)]
    attenuation: Option<String>,
    #[arg(long)]
    oracle_check: bool,
    /// Output path prefix.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    no_timing: bool,
    /// squared-error (default) or absolute-error.
    #[arg(long)]
    loss: Option<String>,
    /// Comma-separated flat parameter vector.
    #[arg(long, allow_hyphen_values = true)]
    init_params: Option<String>,
    /// Comma-separated initial recurrent state, loops concatenated.
    #[arg(long, allow_hyphen_values = true)]
    init_state: Option<String>,
}

impl Flags {
    fn to_raw(&self) -> Result<RawConfig, ExperimentError> {
        let mut raw = RawConfig::default();
        let values = [
            ("cell", &self.cell),
            ("dims", &self.dims),
            ("task", &self.task),
            ("steps", &self.steps),
            ("eta", &self.eta),
            ("seed", &self.seed),
            ("attenuation", &self.attenuation),
            ("out", &self.out),
            ("loss", &self.loss),
            ("init-params", &self.init_params),
            ("init-state", &self.init_state),
        ];
        for (k, v) in values {
            if let Some(v) = v {
                raw.set(k, v)?;
            }
        }
        for (k, on) in [
            ("update-params", self.update_params),
            ("oracle-check", self.oracle_check),
            ("no-timing", self.no_timing),
        ] {
            if on {
                raw.set(k, "true")?;
            }
        }
        Ok(raw)
    }
}

fn load(
    file: Option<&PathBuf>,
    method: Option<&str>,
    flags: &RawConfig,
) -> Result<ExperimentConfig, ExperimentError> {
    let mut raw = match file {
        Some(path) => RawConfig::from_file(path)?,
        None => RawConfig::default(),
    };
    raw.merge(flags);
    if let Some(m) = method {
        raw.set("method", m)?;
    }
    raw.build()
}

fn dispatch(cli: Cli) -> Result<u8, ExperimentError> {
    match cli.command {
        Command::Run {
            config,
            method,
            flags,
        } => {
            let cfg = load(config.as_ref(), method.as_deref(), &flags.to_raw()?)?;
            let result = experiment::run(&cfg)?;
            if let experiment::ExitReason::Divergence { step, what } = &result.exit_reason {
                eprintln!("diverged at step {step}: {what}");
            }
            Ok(result.exit_code())
        }
        Command::Compare {
            config,
            method,
            flags,
        } => {
            let flags = flags.to_raw()?;
            let configs = match (config.len(), method.len()) {
                (0, 0) => {
                    return Err(ExperimentError::Config(
                        "compare needs --method or --config at least once".into(),
                    ))
                }
                (0 | 1, _) if !method.is_empty() => method
                    .iter()
                    .map(|m| load(config.first(), Some(m), &flags))
                    .collect::<Result<Vec<_>, _>>()?,
                (_, 0 | 1) => config
                    .iter()
                    .map(|c| load(Some(c), method.first().map(String::as_str), &flags))
                    .collect::<Result<Vec<_>, _>>()?,
                _ => {
                    return Err(ExperimentError::Config(
                        "repeat either --method or --config, not both".into(),
                    ))
                }
            };
            let result = experiment::compare(&configs)?;
            for run in &result.runs {
                if let experiment::ExitReason::Divergence { step, what } = &run.exit_reason {
                    eprintln!("{} diverged at step {step}: {what}", run.config.method);
                }
            }
            Ok(result.exit_code())
        }
        Command::Bench {
            config,
            method,
            checkpoints,
            window,
            flags,
        } => {
            let cfg = load(config.as_ref(), method.as_deref(), &flags.to_raw()?)?;
            let checkpoints = checkpoints
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| ExperimentError::Config(format!("bad checkpoints `{checkpoints}`")))?;
            let report = experiment::bench(&cfg, &checkpoints, window)?;
            println!(
                "{} {}: median µs {:?}, ratio {:.3}",
                report.method, report.cell, report.median_micros, report.ratio
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
