use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use reve_core::data::{load_idx, LabeledDataset, Split};
use reve_core::kde::BandwidthRule;
use reve_core::runner::{self, LoadedRun, MetricsRow, RunConfig, CHECKPOINT_FILE, DENSITY_FILE};
use reve_core::verify;
use reve_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "reve",
    version,
    about = "Train and check REVE-regularized classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config; flags override values in the file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        sigma2: Option<f64>,
        /// Monte Carlo samples per input.
        #[arg(long = "s-samples")]
        s_samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test error (%) of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train`, `test` (splits of the run's dataset) or `idx:<images>,<labels>`.
        #[arg(long, default_value = "test")]
        data: String,
    },
    /// Kernel density estimates of coordinates of Y and Z.
    ExportDensity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated coordinate indices.
        #[arg(long, value_delimiter = ',', required = true)]
        coords: Vec<usize>,
        #[arg(long, default_value = "test")]
        data: String,
        /// Fixed bandwidth instead of Silverman's rule.
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Output file; defaults to density.txt beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the information-theory, projection and gradient property suites.
    Verify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) =>
        {
            e.exit()
        }
        Err(e) => {
            let text = e.to_string();
            let message = text.split("\n\nUsage:").next().unwrap_or_default();
            let message: Vec<&str> = message.split_whitespace().collect();
            eprintln!(
                "error: usage: {}",
                message.join(" ").trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {message}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            seed,
            beta,
            sigma2,
            s_samples,
            out,
        } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(beta) = beta {
                config.reve_mut().beta = beta;
            }
            if let Some(sigma2) = sigma2 {
                config.reve_mut().sigma2 = sigma2;
            }
            if let Some(samples) = s_samples {
                config.reve_mut().samples = samples;
            }
            if let Some(out) = out {
                config.out_dir = out;
            }
            train(config)
        }
        Command::Evaluate { checkpoint, data } => {
            let run = LoadedRun::load(&checkpoint)?;
            let dataset = dataset(&run, &data)?;
            println!("{}", run.evaluate(&dataset)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportDensity {
            checkpoint,
            coords,
            data,
            bandwidth,
            out,
        } => {
            let run = LoadedRun::load(&checkpoint)?;
            let dataset = dataset(&run, &data)?;
            let rule = bandwidth.map_or(BandwidthRule::Silverman, BandwidthRule::Fixed);
            let densities = runner::export_density(&run, &dataset, &coords, rule)?;
            let out = out.unwrap_or_else(|| beside(&checkpoint, DENSITY_FILE));
            fs::write(&out, runner::density_table(&densities))?;
            println!("{}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { trials, seed } => {
            let reports = verify::run_all(trials, seed)?;
            for report in &reports {
                println!("{report}");
            }
            Ok(if reports.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn train(config: RunConfig) -> Result<ExitCode> {
    eprintln!("{}", MetricsRow::HEADER);
    let outcome = runner::train_with(&config, |row| eprintln!("{}", row.csv()))?;
    outcome.save(&config.out_dir)?;
    let last = outcome.final_metrics().expect("at least one epoch");
    println!(
        "test_error {} train_error {} checkpoint {}",
        last.test_error,
        last.train_error,
        config.out_dir.join(CHECKPOINT_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn beside(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(name)
}

fn dataset(run: &LoadedRun, spec: &str) -> Result<LabeledDataset> {
    match spec {
        "train" => Ok(run.config.data.load()?.0),
        "test" => Ok(run.config.data.load()?.1),
        _ => {
            let paths = spec
                .strip_prefix("idx:")
                .and_then(|rest| rest.split_once(','))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "data spec `{spec}` is not train, test or idx:<images>,<labels>"
                    ))
                })?;
            load_idx(paths.0, paths.1, None, Split::Test)
        }
    }
}
