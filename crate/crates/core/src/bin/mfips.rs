use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfips::cli::commands::{
    cmd_simulate, cmd_summarize, cmd_sweep_gamma, cmd_train, cmd_tune, load_simulation_spec,
};
use mfips::cli::{BootstrapSettings, CliError, ExperimentConfig, Overrides, SummaryRow};

#[derive(Parser)]
#[command(
    name = "mfips",
    version,
    about = "Debiased rating prediction with inverse propensity scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate biased and unbiased ratings and write the splits.
    Simulate {
        /// Simulation spec, bare or as the [simulation] table of a config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's gamma.
        #[arg(long)]
        gamma: Option<f64>,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit and evaluate every configured method and seed.
    Train(RunArgs),
    /// Grid-search hyperparameters on the validation split.
    Tune {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluate at most this many grid points per method.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Simulate and fit across several gammas.
    SweepGamma {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated gammas, overriding [sweep].
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Rebuild results.tsv and summary.tsv from the cell files in a run directory.
    Summarize {
        #[arg(long)]
        out: PathBuf,
        /// Config whose [sweep] bootstrap settings to use.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    threads: Option<usize>,
    /// Clamp predictions into the rating scale before scoring.
    #[arg(long)]
    clamp_predictions: bool,
    /// `[method.<name>]` tables, e.g. best_params.toml from `tune`.
    #[arg(long)]
    params: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self, gammas: Option<Vec<f64>>) -> Result<ExperimentConfig, CliError> {
        let overrides = Overrides {
            out: self.out.clone(),
            seeds: self.seeds.clone(),
            gammas,
            threads: self.threads,
            clamp_predictions: self.clamp_predictions,
            params: self.params.clone(),
        };
        overrides.apply(ExperimentConfig::load(&self.config)?)
    }
}

fn print_summary(rows: &[SummaryRow]) {
    for r in rows {
        let gamma = r.gamma.map_or(String::new(), |g| format!("gamma={g} "));
        println!(
            "{gamma}{:<11} mse {:.4} ± {:.4}  mae {:.4} ± {:.4}  ({} runs)",
            r.method.as_str(),
            r.mse_mean,
            r.mse_std,
            r.mae_mean,
            r.mae_std,
            r.runs
        );
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            gamma,
            seed,
        } => {
            let mut spec = load_simulation_spec(&config)?;
            if let Some(g) = gamma {
                spec.gamma = g;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let sim = cmd_simulate(&spec, &out)?;
            let s = &sim.splits;
            println!(
                "train {} validation {} mcar {} test {} -> {}",
                s.train.len(),
                s.validation.len(),
                s.mcar.len(),
                s.test.len(),
                out.display()
            );
        }
        Command::Train(args) => print_summary(&cmd_train(&args.load(None)?)?),
        Command::Tune { run, budget } => {
            for (method, h) in cmd_tune(&run.load(None)?, budget)? {
                let tau = h.tau.map_or("default".to_owned(), |t| t.to_string());
                println!(
                    "{:<11} lr {} l2 {} dim {} alpha1 {} alpha2 {} tau {tau}",
                    method.as_str(),
                    h.learning_rate,
                    h.l2,
                    h.dim,
                    h.alpha1,
                    h.alpha2
                );
            }
        }
        Command::SweepGamma { run, gammas } => print_summary(&cmd_sweep_gamma(&run.load(gammas)?)?),
        Command::Summarize { out, config } => {
            let boot = match config {
                Some(path) => {
                    let c = ExperimentConfig::load(&path)?;
                    BootstrapSettings {
                        resamples: c.sweep.bootstrap_resamples,
                        confidence: c.sweep.confidence,
                    }
                }
                None => BootstrapSettings::default(),
            };
            print_summary(&cmd_summarize(&out, boot)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
