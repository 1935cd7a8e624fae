use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use feedback_cli::config::ConfigError;
use feedback_cli::demos::{demo_config, demo_names};
use feedback_cli::{run, validate_config, RunConfig, RunOptions, RunStatus, OUTPUT_DIR_ENV};

/// Optimal feedback synthesis on structured grids.
#[derive(Parser)]
#[command(name = "fbsynth", version, after_help = format!("The output directory can be overridden with {OUTPUT_DIR_ENV}."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a config file.
    Run {
        config: PathBuf,
        /// Worker threads (overrides the config; 0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Check a config file and list every violation.
    Validate { config: PathBuf },
    /// Run a shipped demo (lqr-1d, lqr-2d, academic-burgers).
    Demo {
        name: String,
        #[arg(long)]
        workers: Option<usize>,
        /// Print the demo config instead of running it.
        #[arg(long)]
        print: bool,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(RunStatus::ConfigError.exit_code() as u8)
    })
}

fn execute(config: &RunConfig, workers: Option<usize>) -> ExitCode {
    let mut options = RunOptions::from_env();
    options.workers = workers;
    let outcome = run(config, &options);
    for v in &outcome.violations {
        eprintln!("config error: {v}");
    }
    if let (Some(dir), Some(summary)) = (&outcome.output_dir, &outcome.summary) {
        let residual = summary.final_residual.map_or("n/a".to_string(), |r| format!("{r:.3e}"));
        println!(
            "{}: {:?} after {} iterations (residual {residual}); outputs in {}",
            summary.name,
            summary.status,
            summary.iterations,
            dir.display()
        );
        if let Some(g) = summary.gain_error_vs_riccati {
            println!("gain error vs Riccati: {g:.3e}");
        }
        if let Some(stage) = &summary.failed_stage {
            eprintln!("failed in stage {stage}: {}", summary.error.as_deref().unwrap_or(""));
        }
    }
    ExitCode::from(outcome.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, workers } => match load(&config) {
            Ok(cfg) => execute(&cfg, workers),
            Err(code) => code,
        },
        Command::Validate { config } => {
            let cfg = match load(&config) {
                Ok(cfg) => cfg,
                Err(code) => return code,
            };
            let violations = validate_config(&cfg);
            if violations.is_empty() {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            } else {
                for v in &violations {
                    println!("{v}");
                }
                ExitCode::from(RunStatus::ConfigError.exit_code() as u8)
            }
        }
        Command::Demo { name, workers, print } => match demo_config(&name) {
            None => {
                let names: Vec<_> = demo_names().collect();
                eprintln!("error: unknown demo {name:?}; available: {}", names.join(", "));
                ExitCode::from(RunStatus::ConfigError.exit_code() as u8)
            }
            Some(Err(ConfigError::Parse(e))) => {
                eprintln!("error: demo config does not parse: {e}");
                ExitCode::from(RunStatus::Failed.exit_code() as u8)
            }
            Some(Err(e)) => {
                eprintln!("error: {e}");
                ExitCode::from(RunStatus::Failed.exit_code() as u8)
            }
            Some(Ok(cfg)) if print => {
                print!("{}", feedback_cli::demos::demo_source(&name).unwrap_or_default());
                let _ = cfg;
                ExitCode::SUCCESS
            }
            Some(Ok(cfg)) => execute(&cfg, workers),
        },
    }
}
