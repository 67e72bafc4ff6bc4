use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use superenv::{derive_seed, Label};
use superenv_cli::{run, ExperimentConfig, RunError};

#[derive(Parser)]
#[command(name = "superenv", version, about = "Branching particle systems in a random environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Override a key, as `section.key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory, overriding `run.output`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Validate a config and print it with defaults filled in.
    Check { config: PathBuf },
    /// Print the stream seed for a master seed and labels.
    Seed {
        master: u64,
        /// Labels; integers are hashed as integers, anything else as text.
        labels: Vec<String>,
    },
}

fn load(config: &Path, overrides: &[String], output: Option<&PathBuf>) -> Result<ExperimentConfig, RunError> {
    let mut cfg = ExperimentConfig::load(config)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| superenv_cli::ConfigError::new(o.as_str(), "override is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(out) = output {
        cfg.set("run.output", &out.to_string_lossy())?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, overrides, output } => match load(&config, &overrides, output.as_ref()).and_then(|c| run(&c)) {
            Ok(summary) => {
                for c in &summary.report.checks {
                    println!("{} {} value={} tolerance={}", if c.pass { "PASS" } else { "FAIL" }, c.statistic, c.value, c.tolerance);
                }
                println!("wrote {} files to {}", summary.files.len(), summary.output.display());
                summary.exit_code()
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Command::Check { config } => match load(&config, &[], None).and_then(|c| c.validate().map(|_| c).map_err(RunError::from)) {
            Ok(cfg) => {
                print!("{}", cfg.resolved_text());
                println!("# hash {}", cfg.content_hash());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Command::Seed { master, labels } => {
            let labels: Vec<Label<'_>> =
                labels.iter().map(|l| l.parse::<u64>().map(Label::Int).unwrap_or(Label::Str(l.as_str()))).collect();
            println!("{}", derive_seed(master, &labels));
            0
        }
    };
    ExitCode::from(code as u8)
}
